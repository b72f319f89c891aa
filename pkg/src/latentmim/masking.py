"""Mask plans and the samplers that produce them.

Visible patches are drawn sequentially without replacement: each draw picks
an index with probability proportional to the weight still remaining, then
removes it. Uniform sampling is the same procedure with equal weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from latentmim.errors import ConfigError


def num_visible(n: int, ratio: float) -> int:
    """ceil((1 - ratio) * n), robust to float error when the product is integral."""
    check_ratio(ratio)
    return int(math.ceil(round((1.0 - ratio) * n, 9)))


def check_ratio(ratio: float) -> None:
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1), got {ratio}")


@dataclass(frozen=True)
class MaskPlan:
    """Partition of patch indices into visible and masked sets.

    Arrays may carry leading batch dimensions: ``unmasked`` is ``[..., K]`` and
    ``masked`` is ``[..., N - K]``. ``restore_order[..., j]`` is the row of
    ``concat(unmasked, masked)`` that holds patch ``j``.
    """

    unmasked: np.ndarray
    masked: np.ndarray
    ratio: float
    restore_order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        unmasked = np.asarray(self.unmasked, dtype=np.int64)
        masked = np.asarray(self.masked, dtype=np.int64)
        if unmasked.shape[:-1] != masked.shape[:-1]:
            raise ValueError(f"batch shapes differ: {unmasked.shape} vs {masked.shape}")
        object.__setattr__(self, "unmasked", unmasked)
        object.__setattr__(self, "masked", masked)
        order = np.concatenate([unmasked, masked], axis=-1)
        object.__setattr__(self, "restore_order", np.argsort(order, axis=-1, kind="stable"))

    @property
    def num_patches(self) -> int:
        return self.unmasked.shape[-1] + self.masked.shape[-1]

    @property
    def num_visible(self) -> int:
        return self.unmasked.shape[-1]

    @property
    def batched(self) -> bool:
        return self.unmasked.ndim > 1

    def visible_mask(self) -> np.ndarray:
        """Boolean ``[..., N]``, True where the patch is visible."""
        out = np.zeros(self.unmasked.shape[:-1] + (self.num_patches,), dtype=bool)
        np.put_along_axis(out, self.unmasked, True, axis=-1)
        return out

    def validate(self) -> None:
        n = self.num_patches
        order = np.concatenate([self.unmasked, self.masked], axis=-1)
        if not np.array_equal(np.sort(order, axis=-1), np.broadcast_to(np.arange(n), order.shape)):
            raise ValueError("unmasked and masked do not partition 0..N-1")
        if self.unmasked.shape[-1] != num_visible(n, self.ratio):
            raise ValueError(
                f"{self.unmasked.shape[-1]} visible patches, expected {num_visible(n, self.ratio)}"
            )

    def for_batch(self, batch_size: int) -> "MaskPlan":
        """Broadcast a single plan to ``batch_size`` rows."""
        if self.batched:
            if self.unmasked.shape[0] != batch_size:
                raise ValueError(f"plan has batch {self.unmasked.shape[0]}, expected {batch_size}")
            return self
        return MaskPlan(
            np.broadcast_to(self.unmasked, (batch_size,) + self.unmasked.shape).copy(),
            np.broadcast_to(self.masked, (batch_size,) + self.masked.shape).copy(),
            self.ratio,
        )

    @staticmethod
    def stack(plans: Sequence["MaskPlan"]) -> "MaskPlan":
        ratios = {p.ratio for p in plans}
        if len(ratios) != 1:
            raise ValueError(f"cannot stack plans with different ratios {sorted(ratios)}")
        return MaskPlan(
            np.stack([p.unmasked for p in plans]), np.stack([p.masked for p in plans]), ratios.pop()
        )

    @staticmethod
    def identity(n: int) -> "MaskPlan":
        return MaskPlan(np.arange(n), np.arange(0), 0.0)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def image_seed(global_seed: int, epoch: int, index: int) -> np.random.SeedSequence:
    """Per-image seed: differs across epochs and images, reproducible per run."""
    return np.random.SeedSequence([int(global_seed), int(epoch), int(index)])


def _check_probs(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if not np.all(np.isfinite(probs)):
        raise ValueError("sampling probabilities contain non-finite values")
    if np.any(probs < 0):
        raise ValueError("sampling probabilities must be nonnegative")
    return probs


def draw_without_replacement(weights: np.ndarray, k: int, uniforms: np.ndarray) -> np.ndarray:
    """Sequential weighted draws without replacement, vectorized over rows.

    ``weights`` is ``[T, N]`` (nonnegative, any scale), ``uniforms`` is
    ``[T, k]`` in [0, 1). Row t picks ``k`` distinct indices; draw i uses
    ``uniforms[t, i]`` against the cumulative remaining weight. Once a row has
    no positive weight left, the remaining draws are uniform over the indices
    not yet taken.
    """
    w = np.array(weights, dtype=np.float64, copy=True)
    t, n = w.shape
    if k > n:
        raise ValueError(f"cannot draw {k} of {n} without replacement")
    out = np.empty((t, k), dtype=np.int64)
    rows = np.arange(t)
    available = np.ones((t, n), dtype=bool)
    for i in range(k):
        cum = np.cumsum(w, axis=1)
        depleted = cum[:, -1] <= 0.0
        if depleted.any():
            w[depleted] = available[depleted]
            cum[depleted] = np.cumsum(w[depleted], axis=1)
        x = uniforms[:, i] * cum[:, -1]
        idx = np.minimum((cum <= x[:, None]).sum(axis=1), n - 1)
        bad = w[rows, idx] <= 0.0
        if bad.any():
            idx[bad] = _last_positive(w[bad])
        out[:, i] = idx
        w[rows, idx] = 0.0
        available[rows, idx] = False
    return out


def _last_positive(w: np.ndarray) -> np.ndarray:
    n = w.shape[1]
    return n - 1 - np.argmax((w > 0.0)[:, ::-1], axis=1)


def _plan_from_visible(visible: np.ndarray, n: int, ratio: float) -> MaskPlan:
    visible = np.sort(visible, axis=-1)
    keep = np.zeros(visible.shape[:-1] + (n,), dtype=bool)
    np.put_along_axis(keep, visible, True, axis=-1)
    order = np.argsort(keep, axis=-1, kind="stable")
    masked = order[..., : n - visible.shape[-1]]
    return MaskPlan(visible, masked, ratio)


def sample_semantic(s_class, ratio: float, seed) -> MaskPlan:
    """Draw ``ceil((1 - ratio) N)`` visible patches with probabilities ``s_class``."""
    probs = _check_probs(s_class)
    if probs.ndim != 1:
        raise ValueError(f"s_class must be 1-D, got shape {probs.shape}")
    n = probs.shape[0]
    k = num_visible(n, ratio)
    uniforms = _as_rng(seed).random((1, k))
    visible = draw_without_replacement(probs[None], k, uniforms)[0]
    return _plan_from_visible(visible, n, ratio)


def sample_uniform(n: int, ratio: float, seed) -> MaskPlan:
    """Keep the first ``K`` entries of a seeded random permutation.

    Independent of the weighted draw, so it can serve as the reference that
    semantic sampling with flat ``s_class`` is compared against.
    """
    k = num_visible(n, ratio)
    visible = _as_rng(seed).permutation(n)[:k]
    return _plan_from_visible(visible, n, ratio)


def sample_batch(s_class, ratio: float, seeds: Sequence) -> MaskPlan:
    """One plan per row of ``s_class`` ``[B, N]``, row b seeded by ``seeds[b]``.

    Row b equals ``sample_semantic(s_class[b], ratio, seeds[b])``.
    """
    probs = _check_probs(s_class)
    b, n = probs.shape
    if len(seeds) != b:
        raise ValueError(f"{len(seeds)} seeds for {b} rows")
    k = num_visible(n, ratio)
    uniforms = np.stack([_as_rng(s).random(k) for s in seeds]) if k else np.zeros((b, 0))
    visible = draw_without_replacement(probs, k, uniforms)
    return _plan_from_visible(visible, n, ratio)


def sample_many(s_class, ratio: float, trials: int, seed) -> np.ndarray:
    """Visible index sets ``[trials, K]`` for one probability vector."""
    probs = _check_probs(s_class)
    n = probs.shape[0]
    k = num_visible(n, ratio)
    uniforms = _as_rng(seed).random((trials, k))
    return draw_without_replacement(np.broadcast_to(probs, (trials, n)), k, uniforms)


def top_k_semantic(s_class, fraction: float) -> np.ndarray:
    """Indices of the ``ceil(fraction N)`` largest entries; ties go to the lower index."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    s = np.asarray(s_class, dtype=np.float64)
    k = int(math.ceil(round(fraction * s.shape[-1], 9)))
    order = np.argsort(-s, axis=-1, kind="stable")
    return order[..., :k]
