"""Pretraining loop.

One step: teacher targets on the full image -> sample the visible set ->
encode visible patches -> decode -> reassemble -> normalized loss -> AdamW.
All randomness is derived from ``(seed, epoch, image index)``, so a run is a
pure function of its config and data, and resuming from a checkpoint replays
the uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from latentmim.config import TrainConfig, build_config, config_id
from latentmim.data import ImageBatch, ImageSet, batches_per_epoch, epoch_batch, load_image_folder, make_synthetic
from latentmim.decoder import Decoder
from latentmim.errors import CheckpointFormatError, ConfigError, NumericError
from latentmim.masking import image_seed, sample_batch
from latentmim.objective import LossReport, kd_loss, reconstruction_loss
from latentmim.params import load_module_arrays, module_arrays, parameter_hash
from latentmim.schedule import WarmupCosine
from latentmim.teacher import Teacher, load_teacher, make_stub_teacher, pixel_targets, teacher_features
from latentmim.tensorio import load_tensors, save_tensors
from latentmim.vit import ViTEncoder

log = logging.getLogger(__name__)


@dataclass
class StepRecord:
    step: int
    epoch: int
    lr: float
    total: float
    masked_mean: float
    unmasked_mean: float

    def line(self) -> str:
        return (
            f"step={self.step} epoch={self.epoch} lr={self.lr:.6g} total={self.total:.6f} "
            f"masked_mean={self.masked_mean:.6f} unmasked_mean={self.unmasked_mean:.6f}"
        )


def build_teacher(cfg: TrainConfig) -> Teacher:
    if cfg.teacher_path:
        return load_teacher(cfg.teacher_path)
    return make_stub_teacher(cfg.teacher_seed, cfg.teacher)


def build_dataset(cfg: TrainConfig) -> ImageSet:
    if cfg.data_dir:
        return load_image_folder(cfg.data_dir)
    return make_synthetic(cfg.synthetic_images, cfg.vit.image_size, seed=cfg.seed)


def _param_groups(modules, weight_decay):
    decay, no_decay = [], []
    for module in modules:
        for name, p in module.named_parameters():
            if not p.requires_grad:
                continue
            # biases, norms, class/mask tokens are not decayed
            (no_decay if p.ndim <= 1 or name.endswith("_token") else decay).append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


class Trainer:
    def __init__(self, cfg: TrainConfig, dataset: ImageSet | None = None, teacher: Teacher | None = None):
        self.cfg = cfg
        self.dataset = dataset if dataset is not None else build_dataset(cfg)
        self.teacher = teacher if teacher is not None else build_teacher(cfg)
        tc = self.teacher.config
        if (tc.image_size, tc.patch_size) != (cfg.vit.image_size, cfg.vit.patch_size):
            raise ConfigError(
                f"teacher grid ({tc.image_size}px / patch {tc.patch_size}) differs from student grid "
                f"({cfg.vit.image_size}px / patch {cfg.vit.patch_size})"
            )
        if cfg.teacher != tc:
            cfg = dataclasses.replace(cfg, teacher=tc)
            self.cfg = cfg
        self.encoder = ViTEncoder(cfg.vit, seed=cfg.seed)
        self.decoder = Decoder(cfg.dec, cfg.vit.embed_dim, cfg.vit.grid_size, seed=cfg.seed + 1)
        self.optimizer = torch.optim.AdamW(
            _param_groups([self.encoder, self.decoder], cfg.weight_decay),
            lr=0.0,
            betas=cfg.betas,
            weight_decay=cfg.weight_decay,
        )
        self.steps_per_epoch = batches_per_epoch(len(self.dataset), cfg.batch_size)
        total = cfg.max_steps if cfg.max_steps > 0 else cfg.epochs * self.steps_per_epoch
        warmup = min(total, cfg.warmup_epochs * self.steps_per_epoch)
        self.schedule = WarmupCosine(cfg.effective_lr(), warmup, total)
        self.mean, self.std = cfg.normalization_stats()
        self.step = 0
        self.history: list[StepRecord] = []

    @property
    def total_steps(self) -> int:
        return self.schedule.total_steps

    @property
    def epoch(self) -> int:
        return self.step // self.steps_per_epoch

    def modules(self):
        return {"encoder": self.encoder, "decoder": self.decoder}

    def batch_for(self, step: int) -> ImageBatch:
        epoch, b = divmod(step, self.steps_per_epoch)
        return epoch_batch(self.dataset, epoch, b, self.cfg.batch_size, self.cfg.vit.image_size,
                           self.cfg.seed, self.mean, self.std)

    def forward(self, batch: ImageBatch) -> tuple[LossReport, torch.Tensor]:
        """Loss for one batch (no parameter update). Also returns the predictions."""
        cfg = self.cfg
        images = batch.images
        need_teacher = cfg.target == "latent" or cfg.sampler == "semantic"
        bundle = teacher_features(images, self.teacher, cfg.vit) if need_teacher else None
        targets = bundle.targets if cfg.target == "latent" else pixel_targets(images, cfg.vit.patch_size).targets
        n = cfg.vit.num_patches
        if cfg.sampler == "semantic":
            probs = bundle.s_class.double().numpy()
        else:
            probs = np.full((images.shape[0], n), 1.0 / n)
        seeds = [image_seed(cfg.seed, batch.epoch, i) for i in batch.indices]
        plan = sample_batch(probs, cfg.mask_ratio, seeds)
        latent = self.encoder(images, plan)
        pred = self.decoder(latent, plan)
        try:
            if cfg.loss_kind == "kd":
                report = kd_loss(pred, targets, plan)
            else:
                report = reconstruction_loss(pred, targets, plan)
        except NumericError as exc:
            raise NumericError(
                f"step {self.step}: {exc}; dataset indices of the batch: {batch.indices.tolist()}"
            ) from None
        return report, pred

    def train_step(self, batch: ImageBatch | None = None) -> LossReport:
        if batch is None:
            batch = self.batch_for(self.step)
        lr = self.schedule(self.step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.encoder.train()
        self.decoder.train()
        report, _ = self.forward(batch)
        if not torch.isfinite(report.total):
            raise NumericError(f"step {self.step}: non-finite loss; batch indices {batch.indices.tolist()}")
        self.optimizer.zero_grad(set_to_none=True)
        report.total.backward()
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(
                list(self.encoder.parameters()) + list(self.decoder.parameters()), self.cfg.grad_clip
            )
        self.optimizer.step()
        self.history.append(
            StepRecord(self.step, batch.epoch, lr, float(report.total.detach()), report.masked_mean, report.unmasked_mean)
        )
        self.step += 1
        return report

    def run(self, steps: int | None = None, on_step: Callable[[StepRecord], None] | None = None,
            checkpoint_dir=None) -> list[StepRecord]:
        """Train until ``steps`` more steps have run or the schedule ends."""
        end = self.total_steps if steps is None else min(self.total_steps, self.step + steps)
        every = self.cfg.checkpoint_every
        while self.step < end:
            self.train_step()
            if on_step is not None:
                on_step(self.history[-1])
            if checkpoint_dir is not None and every > 0 and self.step % every == 0:
                self.save(Path(checkpoint_dir) / f"checkpoint_{self.step:07d}.bin")
        return self.history

    def loss_stream(self) -> list[float]:
        return [r.total for r in self.history]

    def final_losses(self, window: int | None = None) -> dict[str, float]:
        """Means of the last ``window`` step records (default: one epoch)."""
        window = window or self.steps_per_epoch
        tail = self.history[-window:]
        if not tail:
            return {"total": math.nan, "masked_mean": math.nan, "unmasked_mean": math.nan}
        return {
            key: float(np.mean([getattr(r, key) for r in tail]))
            for key in ("total", "masked_mean", "unmasked_mean")
        }

    def teacher_hash(self) -> str:
        return parameter_hash(self.teacher)

    # ------------------------------------------------------------------
    # checkpoints

    def save(self, path) -> None:
        tensors = {}
        for name, module in self.modules().items():
            tensors.update(module_arrays(module, prefix=f"{name}."))
        names = self._param_names()
        opt_steps = {}
        for p, name in names.items():
            state = self.optimizer.state.get(p)
            if not state:
                continue
            tensors[f"optim.{name}.exp_avg"] = state["exp_avg"].numpy()
            tensors[f"optim.{name}.exp_avg_sq"] = state["exp_avg_sq"].numpy()
            opt_steps[name] = int(state["step"])
        meta = {
            "kind": "train-checkpoint",
            "step": self.step,
            "epoch": self.epoch,
            "config": self.cfg.to_flat(),
            "optimizer_steps": opt_steps,
            "teacher_hash": self.teacher_hash(),
            "rng": {"seed": self.cfg.seed, "scheme": "seedsequence(seed, epoch, index)"},
            "history": [dataclasses.asdict(r) for r in self.history],
        }
        save_tensors(path, tensors, meta)

    def _param_names(self) -> dict:
        out = {}
        for mname, module in self.modules().items():
            for pname, p in module.named_parameters():
                out[p] = f"{mname}.{pname}"
        return out

    @classmethod
    def from_checkpoint(cls, path, dataset: ImageSet | None = None, teacher: Teacher | None = None) -> "Trainer":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        arrays, meta = load_tensors(path)
        if meta.get("kind") != "train-checkpoint":
            raise CheckpointFormatError(f"{path} is not a training checkpoint (kind={meta.get('kind')!r})")
        cfg = build_config(meta["config"])
        trainer = cls(cfg, dataset=dataset, teacher=teacher)
        if meta.get("teacher_hash") and meta["teacher_hash"] != trainer.teacher_hash():
            raise CheckpointFormatError(f"{path}: teacher parameters differ from those used for training")
        for name, module in trainer.modules().items():
            load_module_arrays(module, {k: v for k, v in arrays.items() if k.startswith(name + ".")},
                               prefix=f"{name}.")
        steps = meta.get("optimizer_steps", {})
        for p, name in trainer._param_names().items():
            if name in steps:
                trainer.optimizer.state[p] = {
                    "step": torch.tensor(float(steps[name])),
                    "exp_avg": torch.from_numpy(arrays[f"optim.{name}.exp_avg"].copy()),
                    "exp_avg_sq": torch.from_numpy(arrays[f"optim.{name}.exp_avg_sq"].copy()),
                }
        trainer.step = int(meta["step"])
        trainer.history = [StepRecord(**r) for r in meta.get("history", [])]
        return trainer


# ----------------------------------------------------------------------
# ablations

RESULT_COLUMNS = [
    "config_id", "target", "decoder", "sampler", "mask_ratio", "seed", "steps",
    "final_total_loss", "first_total_loss", "masked_mean", "unmasked_mean", "probe_top1", "status",
]


@dataclass
class AblationRow:
    config: TrainConfig
    values: dict = field(default_factory=dict)

    def csv_row(self) -> dict:
        return self.values


def run_ablation(matrix: Iterable[TrainConfig], dataset: ImageSet | None = None, probe: bool = True,
                 probe_epochs: int = 50, on_step=None) -> list[dict]:
    """Train every config; one result dict per config. Failures are recorded, not raised."""
    from latentmim.probes import labeled_split, linear_probe

    rows = []
    for cfg in matrix:
        row = {
            "config_id": config_id(cfg), "target": cfg.target, "decoder": cfg.decoder, "sampler": cfg.sampler,
            "mask_ratio": cfg.mask_ratio, "seed": cfg.seed, "steps": 0,
            "final_total_loss": math.nan, "first_total_loss": math.nan, "masked_mean": math.nan,
            "unmasked_mean": math.nan, "probe_top1": math.nan, "status": "ok",
        }
        try:
            trainer = Trainer(cfg, dataset=dataset)
            trainer.run(on_step=on_step)
            final = trainer.final_losses()
            row.update(
                steps=trainer.step,
                final_total_loss=final["total"],
                first_total_loss=trainer.history[0].total,
                masked_mean=final["masked_mean"],
                unmasked_mean=final["unmasked_mean"],
            )
            if probe and (trainer.dataset.labels >= 0).all() and len(set(trainer.dataset.labels.tolist())) > 1:
                data = labeled_split(trainer.dataset, cfg.vit.image_size, trainer.mean, trainer.std, seed=cfg.seed)
                row["probe_top1"] = linear_probe(trainer.encoder, data, epochs=probe_epochs, seed=cfg.seed).top1
        except Exception as exc:  # noqa: BLE001 - one failed run must not stop the matrix
            log.exception("ablation run %s failed", row["config_id"])
            row["status"] = f"error: {type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def write_results(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in RESULT_COLUMNS})


def ablation_matrix(base: TrainConfig) -> list[TrainConfig]:
    """Desk-scale analogues of the four corner rows of the component ablation:
    pixel/full/uniform, latent/full/uniform, latent/prompting/uniform,
    latent/prompting/semantic."""
    axes = [
        ("pixel", "full", "uniform"),
        ("latent", "full", "uniform"),
        ("latent", "prompting", "uniform"),
        ("latent", "prompting", "semantic"),
    ]
    return [dataclasses.replace(base, target=t, decoder=d, sampler=s) for t, d, s in axes]
