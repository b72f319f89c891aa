"""Frozen-encoder evaluation: linear probing, semantic (top-fraction) probing,
and feature / attention export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from latentmim.data import ImageSet, eval_tensor
from latentmim.errors import ConfigError
from latentmim.masking import MaskPlan, top_k_semantic
from latentmim.params import parameter_hash
from latentmim.teacher import Teacher, teacher_features
from latentmim.tensorio import load_tensors, save_tensors
from latentmim.vit import ViTEncoder


@dataclass
class ProbeResult:
    top1: float
    num_classes: int
    num_train: int
    num_eval: int
    probe_kind: str


@dataclass
class LabeledData:
    train_images: torch.Tensor
    train_labels: torch.Tensor
    eval_images: torch.Tensor
    eval_labels: torch.Tensor

    @property
    def num_classes(self) -> int:
        return int(torch.cat([self.train_labels, self.eval_labels]).max()) + 1


def labeled_split(dataset: ImageSet, resolution: int, mean, std, eval_fraction: float = 0.25,
                  seed: int = 0) -> LabeledData:
    """Deterministic train/eval split of a labeled image set (resize + normalize only)."""
    n = len(dataset)
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x9B0BE])).permutation(n)
    n_eval = max(1, int(round(eval_fraction * n)))
    ev, tr = np.sort(order[:n_eval]), np.sort(order[n_eval:])
    labels = torch.from_numpy(dataset.labels)
    return LabeledData(
        eval_tensor(dataset, resolution, mean, std, tr), labels[tr],
        eval_tensor(dataset, resolution, mean, std, ev), labels[ev],
    )


@torch.no_grad()
def pooled_features(encoder: ViTEncoder, images: torch.Tensor, plans: MaskPlan | None = None,
                    batch_size: int = 256) -> torch.Tensor:
    """Mean of the encoder's patch-token outputs (class token excluded)."""
    was_training = encoder.training
    encoder.eval()
    out = []
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start : start + batch_size]
        if plans is None:
            keep = MaskPlan.identity(encoder.config.num_patches)
        else:
            keep = MaskPlan(plans.unmasked[start : start + batch_size], plans.masked[start : start + batch_size],
                            plans.ratio)
        latent = encoder(chunk, keep).patch_tokens()
        out.append(latent.features.mean(dim=1))
    encoder.train(was_training)
    return torch.cat(out)


def train_linear_classifier(train_x: torch.Tensor, train_y: torch.Tensor, eval_x: torch.Tensor,
                            eval_y: torch.Tensor, num_classes: int, epochs: int = 100, lr: float = 0.1,
                            momentum: float = 0.9, batch_size: int = 64, seed: int = 0) -> float:
    """Fit one linear layer with SGD + momentum; return eval top-1 accuracy.

    Features are standardized with the training statistics first.
    """
    if num_classes < 2:
        raise ConfigError(f"probing needs at least 2 classes, got {num_classes}")
    mu = train_x.mean(0, keepdim=True)
    sd = train_x.std(0, keepdim=True, unbiased=False).clamp_min(1e-6)
    xt, xe = (train_x - mu) / sd, (eval_x - mu) / sd
    gen = torch.Generator().manual_seed(seed)
    head = nn.Linear(xt.shape[1], num_classes)
    with torch.no_grad():
        head.weight.copy_(torch.randn(head.weight.shape, generator=gen) * 0.01)
        head.bias.zero_()
    opt = torch.optim.SGD(head.parameters(), lr=lr, momentum=momentum)
    n = xt.shape[0]
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            loss = F.cross_entropy(head(xt[idx]), train_y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        pred = head(xe).argmax(dim=1)
    return float((pred == eval_y).float().mean())


def _probe(encoder, data: LabeledData, train_plans, eval_plans, epochs, seed, kind) -> ProbeResult:
    num_classes = data.num_classes
    if num_classes < 2:
        raise ConfigError(f"probing needs at least 2 classes, got {num_classes}")
    before = parameter_hash(encoder)
    train_x = pooled_features(encoder, data.train_images, train_plans)
    eval_x = pooled_features(encoder, data.eval_images, eval_plans)
    top1 = train_linear_classifier(train_x, data.train_labels, eval_x, data.eval_labels, num_classes,
                                   epochs=epochs, seed=seed)
    if parameter_hash(encoder) != before:
        raise RuntimeError("encoder parameters changed during probing")
    return ProbeResult(top1, num_classes, len(data.train_labels), len(data.eval_labels), kind)


def linear_probe(encoder: ViTEncoder, data: LabeledData, epochs: int = 100, seed: int = 0) -> ProbeResult:
    return _probe(encoder, data, None, None, epochs, seed, "linear")


def semantic_plans(teacher: Teacher, images: torch.Tensor, fraction: float) -> MaskPlan:
    """Keep the top ``fraction`` of patches by teacher class attention, per image."""
    s_class = teacher_features(images, teacher).s_class.double().numpy()
    n = s_class.shape[1]
    keep = np.sort(top_k_semantic(s_class, fraction), axis=1)
    visible = np.zeros_like(s_class, dtype=bool)
    np.put_along_axis(visible, keep, True, axis=1)
    masked = np.argsort(visible, axis=1, kind="stable")[:, : n - keep.shape[1]]
    return MaskPlan(keep, masked, 1.0 - keep.shape[1] / n)


def semantic_probe(encoder: ViTEncoder, teacher: Teacher, data: LabeledData, fraction: float = 0.5,
                   epochs: int = 100, seed: int = 0) -> ProbeResult:
    """Linear probe on features of only the most-attended patches (train and eval)."""
    teacher_before = parameter_hash(teacher)
    result = _probe(
        encoder, data,
        semantic_plans(teacher, data.train_images, fraction),
        semantic_plans(teacher, data.eval_images, fraction),
        epochs, seed, "semantic_linear",
    )
    if parameter_hash(teacher) != teacher_before:
        raise RuntimeError("teacher parameters changed during probing")
    return result


# ---------------------------------------------------------------------------
# export


def _write_index(path: Path, names, labels) -> Path:
    index = path.with_name(path.name + ".index.csv")
    with open(index, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", "filename", "label"])
        for i, (name, label) in enumerate(zip(names, labels)):
            w.writerow([i, name, int(label)])
    return index


def _prepare(path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory for {path}: {exc.strerror}") from None
    return path


def export_features(encoder: ViTEncoder, images: torch.Tensor, path, names=None, labels=None) -> Path:
    """Write pooled features ``[n, dim]`` plus a ``<path>.index.csv`` sidecar."""
    path = _prepare(path)
    n = images.shape[0]
    names = names if names is not None else [f"row{i}" for i in range(n)]
    labels = labels if labels is not None else [-1] * n
    feats = pooled_features(encoder, images).numpy()
    try:
        save_tensors(path, {"features": feats}, {"kind": "features", "rows": n, "dim": int(feats.shape[1]),
                                                  "pooling": "mean-of-patch-tokens"})
        _write_index(path, names, labels)
    except OSError as exc:
        raise OSError(f"failed writing features to {path}: {exc.strerror}") from None
    return path


def export_attention(teacher: Teacher, images: torch.Tensor, path, names=None, labels=None) -> Path:
    """Write per-image class-attention grids ``[n, g, g]`` plus an index sidecar."""
    path = _prepare(path)
    n = images.shape[0]
    names = names if names is not None else [f"row{i}" for i in range(n)]
    labels = labels if labels is not None else [-1] * n
    s = teacher_features(images, teacher).s_class.numpy()
    g = int(math.isqrt(s.shape[1]))
    try:
        save_tensors(path, {"s_class": s.reshape(n, g, g)},
                     {"kind": "attention", "rows": n, "grid": [g, g], "teacher_id": teacher.teacher_id})
        _write_index(path, names, labels)
    except OSError as exc:
        raise OSError(f"failed writing attention to {path}: {exc.strerror}") from None
    return path


def load_export(path):
    """``(tensors, metadata, index_rows)`` of an exported file."""
    path = Path(path)
    tensors, meta = load_tensors(path)
    with open(path.with_name(path.name + ".index.csv"), newline="") as f:
        rows = list(csv.DictReader(f))
    return tensors, meta, rows
