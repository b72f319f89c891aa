import csv
import dataclasses
import math

import numpy as np
import pytest
import torch

from latentmim.errors import CheckpointFormatError, ConfigError
from latentmim.params import parameter_hash
from latentmim.teacher import make_stub_teacher, teacher_features
from latentmim.trainer import Trainer, ablation_matrix, run_ablation, write_results

from conftest import tiny_train_cfg


def test_identical_runs_have_identical_losses():
    a = Trainer(tiny_train_cfg(seed=3))
    b = Trainer(tiny_train_cfg(seed=3))
    a.run(12)
    b.run(12)
    assert a.loss_stream() == b.loss_stream()
    c = Trainer(tiny_train_cfg(seed=4))
    c.run(12)
    assert c.loss_stream() != a.loss_stream()


def test_teacher_untouched_by_training():
    t = Trainer(tiny_train_cfg())
    images = t.batch_for(0).images
    before_hash, before = t.teacher_hash(), teacher_features(images, t.teacher).digest()
    t.run(8)
    assert all(p.grad is None for p in t.teacher.parameters())
    assert t.teacher_hash() == before_hash
    assert teacher_features(images, t.teacher).digest() == before


def test_zero_lr_leaves_parameters_unchanged():
    t = Trainer(tiny_train_cfg(base_lr=0.0, weight_decay=0.5))
    before = parameter_hash(t.encoder), parameter_hash(t.decoder)
    t.run(3)
    assert (parameter_hash(t.encoder), parameter_hash(t.decoder)) == before


def test_step_zero_has_zero_lr():
    t = Trainer(tiny_train_cfg())
    before = parameter_hash(t.encoder)
    t.train_step()
    assert t.history[0].lr == 0.0
    assert parameter_hash(t.encoder) == before


@pytest.mark.parametrize("decoder,target,sampler", [
    ("prompting", "latent", "semantic"), ("full", "pixel", "uniform"), ("none", "latent", "uniform"),
])
def test_loss_decreases(decoder, target, sampler):
    t = Trainer(tiny_train_cfg(decoder=decoder, target=target, sampler=sampler, epochs=12))
    t.run()
    first = t.history[0].total
    assert t.final_losses()["total"] < first


def test_kd_masked_entries_are_zero():
    t = Trainer(tiny_train_cfg(decoder="none"))
    report, pred = t.forward(t.batch_for(0))
    assert pred.shape[1] == 4  # ceil(0.25 * 16)
    zeros = (report.per_patch == 0).sum(dim=1)
    assert (zeros >= 12).all()
    assert report.masked_mean == 0.0


def test_resume_reproduces_stream(tmp_path):
    full = Trainer(tiny_train_cfg(seed=1))
    full.run(16)
    part = Trainer(tiny_train_cfg(seed=1))
    part.run(7)
    part.save(tmp_path / "ck.bin")
    resumed = Trainer.from_checkpoint(tmp_path / "ck.bin")
    assert resumed.step == 7
    resumed.run(9)
    assert resumed.loss_stream() == full.loss_stream()
    for a, b in zip(full.encoder.parameters(), resumed.encoder.parameters()):
        assert torch.equal(a, b)


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    t = Trainer(tiny_train_cfg())
    t.run(3)
    t.save(tmp_path / "ck.bin")
    r = Trainer.from_checkpoint(tmp_path / "ck.bin")
    for mod in ("encoder", "decoder"):
        for (n, a), (_, b) in zip(getattr(t, mod).named_parameters(), getattr(r, mod).named_parameters()):
            assert torch.equal(a, b), n
            sa, sb = t.optimizer.state[a], r.optimizer.state[b]
            assert torch.equal(sa["exp_avg"], sb["exp_avg"]) and torch.equal(sa["exp_avg_sq"], sb["exp_avg_sq"])
    assert r.cfg == t.cfg and r.history == t.history


def test_checkpoint_with_other_teacher_rejected(tmp_path):
    t = Trainer(tiny_train_cfg())
    t.save(tmp_path / "ck.bin")
    with pytest.raises(CheckpointFormatError, match="teacher"):
        Trainer.from_checkpoint(tmp_path / "ck.bin", teacher=make_stub_teacher(99, t.cfg.teacher))


def test_missing_checkpoint_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nothere.bin"):
        Trainer.from_checkpoint(tmp_path / "nothere.bin")


def test_teacher_grid_must_match():
    cfg = tiny_train_cfg()
    other = dataclasses.replace(cfg.teacher, patch_size=8)
    with pytest.raises(ConfigError, match="grid"):
        Trainer(cfg, teacher=make_stub_teacher(0, other))


def test_schedule_uses_epochs():
    t = Trainer(tiny_train_cfg(epochs=3, warmup_epochs=1))
    assert t.steps_per_epoch == 4 and t.total_steps == 12
    assert t.schedule(4) == pytest.approx(t.cfg.effective_lr())
    t.run()
    assert t.step == 12 and t.history[-1].epoch == 2


def test_ablation_rows(tmp_path):
    base = tiny_train_cfg(epochs=2)
    matrix = ablation_matrix(base)
    rows = run_ablation(matrix, probe=False)
    assert [(r["target"], r["decoder"], r["sampler"]) for r in rows] == [
        ("pixel", "full", "uniform"), ("latent", "full", "uniform"),
        ("latent", "prompting", "uniform"), ("latent", "prompting", "semantic"),
    ]
    assert all(r["status"] == "ok" for r in rows)
    again = run_ablation(matrix[:1], probe=False)
    assert again[0] == rows[0]
    write_results(rows, tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as f:
        header = next(csv.reader(f))
    assert header[:1] == ["config_id"] and "probe_top1" in header


def test_ablation_records_failures_and_continues():
    good = tiny_train_cfg(epochs=1)
    bad = tiny_train_cfg(epochs=1, data_dir="/definitely/not/here")
    rows = run_ablation([bad, good], probe=False)
    assert rows[0]["status"].startswith("error") and "not/here" in rows[0]["status"]
    assert rows[1]["status"] == "ok" and math.isfinite(rows[1]["final_total_loss"])


def test_ablation_with_probe():
    rows = run_ablation([tiny_train_cfg(epochs=1)], probe=True, probe_epochs=5)
    assert 0.0 <= rows[0]["probe_top1"] <= 1.0


def test_step_line_is_key_value():
    t = Trainer(tiny_train_cfg())
    t.train_step()
    fields = dict(kv.split("=") for kv in t.history[0].line().split())
    assert set(fields) == {"step", "epoch", "lr", "total", "masked_mean", "unmasked_mean"}
