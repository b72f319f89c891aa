"""Command-line entry point.

Exit codes: 0 success, 1 configuration error (bad flag, bad key, missing or
malformed file), 2 runtime or numeric failure. Progress is printed as
newline-delimited ``key=value`` lines.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from latentmim.analysis import decoder_flops, reports_csv
from latentmim.config import DecoderConfig, TeacherConfig, build_config, format_config, known_keys, load_config_file
from latentmim.data import eval_tensor, load_image_folder, make_synthetic
from latentmim.errors import CheckpointFormatError, ConfigError, NumericError, SchemaError

OUT_ENV = "LATENTMIM_OUT"
CONFIG_ERRORS = (ConfigError, SchemaError, CheckpointFormatError, FileNotFoundError)

log = logging.getLogger("latentmim")


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _kv(**fields) -> str:
    parts = []
    for k, v in fields.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        parts.append(f"{k}={v}")
    return " ".join(parts)


def _emit(**fields) -> None:
    print(_kv(**fields), flush=True)


def parse_overrides(extra: list[str]) -> dict[str, str]:
    """``--key value`` / ``--key=value`` pairs for dotted config keys."""
    keys = known_keys()
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        name, eq, value = tok[2:].partition("=")
        key = name.replace("-", "_")
        if key not in keys:
            raise ConfigError(f"unknown flag --{name}")
        if not eq:
            if i + 1 >= len(extra):
                raise ConfigError(f"flag --{name} needs a value")
            value = extra[i + 1]
            i += 1
        out[key] = value
        i += 1
    return out


def resolve_config(config_path, extra: list[str]):
    flat = load_config_file(config_path) if config_path else {}
    flat.update(parse_overrides(extra))
    return build_config(flat)


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "runs")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create --out directory {str(out)!r}: {exc.strerror}") from None
    return out


def _add_out(p):
    p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./runs)")


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args, extra) -> int:
    from latentmim.trainer import Trainer

    if args.resume:
        if extra or args.config:
            raise ConfigError("--resume takes the config stored in the checkpoint; drop other config flags")
        trainer = Trainer.from_checkpoint(args.resume)
    else:
        trainer = Trainer(resolve_config(args.config, extra))
    out = _out_dir(args)
    cfg = trainer.cfg
    (out / "config.cfg").write_text(format_config(cfg))
    _emit(event="start", steps=trainer.total_steps, steps_per_epoch=trainer.steps_per_epoch,
          peak_lr=cfg.effective_lr(), teacher=trainer.teacher.teacher_id)

    def on_step(rec):
        if rec.step % args.log_every == 0 or rec.step + 1 == trainer.total_steps:
            print(rec.line(), flush=True)

    ckpt_dir = out if cfg.checkpoint_every > 0 else None
    trainer.run(steps=args.steps, on_step=on_step, checkpoint_dir=ckpt_dir)
    trainer.save(out / "final.bin")
    with open(out / "losses.csv", "w") as f:
        f.write("step,epoch,lr,total,masked_mean,unmasked_mean\n")
        for r in trainer.history:
            f.write(f"{r.step},{r.epoch},{r.lr!r},{r.total!r},{r.masked_mean!r},{r.unmasked_mean!r}\n")
    final = trainer.final_losses()
    _emit(event="final", step=trainer.step, final_total_loss=trainer.history[-1].total if trainer.history else
          float("nan"), tail_mean_total=final["total"], checkpoint=out / "final.bin")
    return 0


def _load_trainer(path):
    from latentmim.trainer import Trainer

    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return Trainer.from_checkpoint(path)


def _dataset_for(args, trainer):
    if args.data_dir:
        return load_image_folder(args.data_dir)
    return trainer.dataset


def cmd_probe(args, extra) -> int:
    from latentmim.probes import labeled_split, linear_probe, semantic_probe

    if extra:
        raise ConfigError(f"unknown flags {extra}")
    trainer = _load_trainer(args.checkpoint)
    out = _out_dir(args)
    dataset = _dataset_for(args, trainer)
    if (dataset.labels < 0).any():
        raise ConfigError("probing needs labeled data (images inside class subdirectories)")
    data = labeled_split(dataset, trainer.cfg.vit.image_size, trainer.mean, trainer.std, seed=args.seed)
    if args.kind == "semantic":
        result = semantic_probe(trainer.encoder, trainer.teacher, data, fraction=args.fraction,
                                epochs=args.epochs, seed=args.seed)
    else:
        result = linear_probe(trainer.encoder, data, epochs=args.epochs, seed=args.seed)
    (out / "probe.json").write_text(json.dumps(dataclasses.asdict(result), indent=2))
    _emit(**dataclasses.asdict(result))
    return 0


def cmd_ablate(args, extra) -> int:
    from latentmim.trainer import ablation_matrix, run_ablation, write_results

    base = resolve_config(args.config, extra)
    out = _out_dir(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    rows = ablation_matrix(base)
    if args.with_kd:
        rows.append(dataclasses.replace(base, target="latent", decoder="none", sampler="semantic"))
    matrix = [dataclasses.replace(cfg, seed=s) for s in seeds for cfg in rows]
    (out / "config.cfg").write_text(format_config(base))
    results = run_ablation(matrix, probe=not args.no_probe, probe_epochs=args.probe_epochs)
    write_results(results, out / "results.csv")
    for row in results:
        _emit(**{k: row[k] for k in ("config_id", "target", "decoder", "sampler", "seed",
                                     "final_total_loss", "probe_top1", "status")})
    _emit(event="done", rows=len(results), results=out / "results.csv")
    return 0 if all(r["status"] == "ok" for r in results) else 2


def cmd_flops(args, extra) -> int:
    if extra:
        raise ConfigError(f"unknown flags {extra}")
    reports = []
    for variant in ("full", "prompting"):
        cfg = DecoderConfig(depth=args.depth, dec_dim=args.dec_dim, num_heads=args.heads,
                            ffn_ratio=args.ffn_ratio, d_target=args.d_target, variant=variant,
                            project_prompts=args.project_prompts)
        reports.append(decoder_flops(cfg, args.n, args.ratio, enc_dim=args.enc_dim))
    text = reports_csv(reports)
    sys.stdout.write(text)
    ratio = reports[1].total_macs / reports[0].total_macs
    _emit(ratio=ratio, saving=1 - ratio)
    if args.out:
        out = _out_dir(args)
        (out / "flops.csv").write_text(text)
        (out / "flops.txt").write_text("\n".join(r.text() for r in reports) + f"\nratio={ratio:.6f}\n")
    return 0


def _teacher_from_args(args, extra):
    from latentmim.teacher import load_teacher, make_stub_teacher

    if getattr(args, "teacher", None):
        if extra:
            raise ConfigError("teacher.* flags cannot be combined with --teacher")
        return load_teacher(args.teacher)
    fields = {}
    for key, value in parse_overrides(extra).items():
        if not key.startswith("teacher."):
            raise ConfigError(f"unknown flag --{key}")
        fields[key.removeprefix("teacher.")] = value
    cfg = build_config({f"teacher.{k}": v for k, v in fields.items()} | {
        "vit.image_size": fields.get("image_size", TeacherConfig().image_size),
        "vit.patch_size": fields.get("patch_size", TeacherConfig().patch_size),
        "sampler": "uniform",
    })
    return make_stub_teacher(args.seed, cfg.teacher)


def cmd_make_stub_teacher(args, extra) -> int:
    from latentmim.teacher import save_teacher

    teacher = _teacher_from_args(args, extra)
    out = _out_dir(args)
    path = out / args.name
    save_teacher(teacher, path)
    _emit(event="teacher", path=path, teacher=teacher.teacher_id)
    return 0


def _images_for(args, resolution, mean, std, fallback=None):
    if args.data_dir:
        ds = load_image_folder(args.data_dir)
    elif fallback is not None:
        ds = fallback
    else:
        ds = make_synthetic(args.synthetic_images, resolution, seed=0)
    return ds, eval_tensor(ds, resolution, mean, std)


def cmd_export_features(args, extra) -> int:
    from latentmim.probes import export_features

    if extra:
        raise ConfigError(f"unknown flags {extra}")
    trainer = _load_trainer(args.checkpoint)
    out = _out_dir(args)
    ds, images = _images_for(args, trainer.cfg.vit.image_size, trainer.mean, trainer.std, trainer.dataset)
    path = export_features(trainer.encoder, images, out / args.name, ds.names, ds.labels)
    _emit(event="export", kind="features", rows=len(ds), path=path)
    return 0


def cmd_export_attn(args, extra) -> int:
    from latentmim.config import NORM_STATS
    from latentmim.probes import export_attention

    teacher = _teacher_from_args(args, extra)
    out = _out_dir(args)
    mean, std = NORM_STATS[args.normalization]
    ds, images = _images_for(args, teacher.config.image_size, mean, std)
    path = export_attention(teacher, images, out / args.name, ds.names, ds.labels)
    _emit(event="export", kind="attention", rows=len(ds), grid=teacher.config.grid_size, path=path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="latentmim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="pretrain an encoder; any config key may be passed as --key value")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--resume", help="training checkpoint to resume from")
    p.add_argument("--steps", type=int, default=None, help="stop after this many steps")
    p.add_argument("--log-every", type=int, default=1)
    _add_out(p)
    p.set_defaults(func=cmd_pretrain, passthrough=True)

    p = sub.add_parser("probe", help="linear or semantic probe of a pretrained encoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", choices=("linear", "semantic"), default="linear")
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-dir", default="")
    _add_out(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", help="run the component ablation matrix; config keys as --key value")
    p.add_argument("--config")
    p.add_argument("--seeds", default="", help="comma-separated seeds (default: config seed)")
    p.add_argument("--with-kd", action="store_true", help="add the decoder-free distillation row")
    p.add_argument("--no-probe", action="store_true")
    p.add_argument("--probe-epochs", type=int, default=50)
    _add_out(p)
    p.set_defaults(func=cmd_ablate, passthrough=True)

    p = sub.add_parser("flops", help="analytic decoder MAC counts")
    p.add_argument("--depth", type=int, default=8)
    p.add_argument("--dec-dim", type=int, default=512)
    p.add_argument("--heads", type=int, default=16)
    p.add_argument("--ffn-ratio", type=float, default=4.0)
    p.add_argument("--n", type=int, default=196)
    p.add_argument("--ratio", type=float, default=0.75)
    p.add_argument("--d-target", type=int, default=768)
    p.add_argument("--enc-dim", type=int, default=768)
    p.add_argument("--project-prompts", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_flops)

    for name, func, help_ in (
        ("export-features", cmd_export_features, "export pooled encoder features"),
        ("export-attn", cmd_export_attn, "export teacher class-attention grids"),
    ):
        p = sub.add_parser(name, help=help_)
        if name == "export-features":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--name", default="features.bin")
        else:
            p.add_argument("--teacher", help="teacher checkpoint (default: stub from --seed and teacher.* flags)")
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--normalization", choices=("clip", "imagenet", "none"), default="clip")
            p.add_argument("--name", default="attention.bin")
            p.set_defaults(passthrough=True)
        p.add_argument("--data-dir", default="")
        p.add_argument("--synthetic-images", type=int, default=64)
        _add_out(p)
        p.set_defaults(func=func)

    p = sub.add_parser("make-stub-teacher", help="write a seeded random teacher; teacher.* keys as flags")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="teacher.bin")
    _add_out(p)
    p.set_defaults(func=cmd_make_stub_teacher, passthrough=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra and not getattr(args, "passthrough", False):
            raise ConfigError(f"unknown flags: {' '.join(extra)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="level=%(levelname)s logger=%(name)s msg=%(message)s")
        return args.func(args, extra)
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
