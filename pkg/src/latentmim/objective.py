"""Normalized reconstruction losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from latentmim.errors import NumericError
from latentmim.masking import MaskPlan

NORM_FLOOR = 1e-8


@dataclass
class LossReport:
    total: torch.Tensor  # scalar, differentiable
    per_patch: torch.Tensor  # [B, N], each entry in [0, 4]
    masked_mean: float
    unmasked_mean: float

    def as_dict(self) -> dict[str, float]:
        return {
            "total": float(self.total),
            "masked_mean": self.masked_mean,
            "unmasked_mean": self.unmasked_mean,
        }


def _check_finite(x: torch.Tensor, name: str) -> None:
    bad = ~torch.isfinite(x)
    if bad.any():
        loc = bad.reshape(bad.shape[0], bad.shape[1], -1).any(-1).nonzero()[0].tolist()
        raise NumericError(f"non-finite value in {name} at (batch, patch) = ({loc[0]}, {loc[1]})")


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(NORM_FLOOR)


def _split_means(per_patch: torch.Tensor, plan: MaskPlan | None):
    if plan is None:
        return float("nan"), float("nan")
    visible = torch.from_numpy(plan.for_batch(per_patch.shape[0]).visible_mask())
    vals = per_patch.detach()
    out = []
    for sel in (~visible, visible):
        out.append(float(vals[sel].mean()) if sel.any() else float("nan"))
    return out[0], out[1]


def reconstruction_loss(p: torch.Tensor, t: torch.Tensor, plan: MaskPlan | None = None) -> LossReport:
    """Mean over all N patches of ``|p_j/|p_j| - t_j/|t_j||^2``, averaged over the batch."""
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {tuple(p.shape)} differs from target shape {tuple(t.shape)}")
    _check_finite(p, "predictions")
    _check_finite(t, "targets")
    per_patch = (l2_normalize(p) - l2_normalize(t)).pow(2).sum(dim=-1)
    total = per_patch.mean(dim=1).mean()
    masked, unmasked = _split_means(per_patch, plan)
    return LossReport(total, per_patch, masked, unmasked)


def kd_loss(encoder_out: torch.Tensor, targets: torch.Tensor, plan: MaskPlan) -> LossReport:
    """Normalized MSE on the visible patches only.

    ``encoder_out`` is ``[B, K, d]`` in the order of ``plan.unmasked``; ``targets``
    is the full ``[B, N, d]`` target tensor (or a TargetBundle). Masked entries
    of ``per_patch`` are exactly 0 and the mean divides by K.
    """
    targets = getattr(targets, "targets", targets)
    b, n, d = targets.shape
    plan = plan.for_batch(b)
    k = plan.num_visible
    if encoder_out.shape != (b, k, d):
        raise ValueError(f"encoder output shape {tuple(encoder_out.shape)}, expected {(b, k, d)}")
    _check_finite(encoder_out, "encoder outputs")
    _check_finite(targets, "targets")
    idx = torch.from_numpy(plan.unmasked)
    t_vis = torch.gather(targets, 1, idx.unsqueeze(-1).expand(-1, -1, d))
    vis_loss = (l2_normalize(encoder_out) - l2_normalize(t_vis)).pow(2).sum(dim=-1)
    per_patch = torch.zeros(b, n, dtype=vis_loss.dtype).scatter(1, idx, vis_loss)
    total = vis_loss.mean(dim=1).mean()
    return LossReport(total, per_patch, float("nan") if k == n else 0.0, float(vis_loss.detach().mean()))
