"""Analytic decoder cost model and mask-sampler diagnostics.

Costs are multiply-accumulate counts (MACs) of the matrix products only;
softmax, norms, activations and biases are ignored.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from latentmim.config import DecoderConfig
from latentmim.masking import check_ratio, num_visible, sample_many


@dataclass(frozen=True)
class FlopReport:
    variant: str
    n: int
    r: float
    depth: int
    attention_macs: int
    ffn_macs: int
    projection_macs: int
    total_macs: int

    def as_row(self) -> dict:
        return asdict(self)

    def text(self) -> str:
        return (
            f"{self.variant:>9} N={self.n} r={self.r:g} depth={self.depth}: "
            f"attention={self.attention_macs:,} ffn={self.ffn_macs:,} "
            f"projection={self.projection_macs:,} total={self.total_macs:,} MACs"
        )


def decoder_flops(cfg: DecoderConfig, n: int, r: float, enc_dim: int | None = None) -> FlopReport:
    """Closed-form MAC count of one decoder forward pass for a single image.

    full:      every block runs Q/K/V/O projections and the FFN over all N
               tokens and an N x N attention (scores + mixing).
    prompting: every block runs Q/K/V/O projections and the FFN over the
               m = N - K mask tokens only and an m x N attention; the K prompt
               rows enter keys/values unprojected (projected if
               ``cfg.project_prompts``).
    none:      input projection and head over the K visible tokens.

    All variants include the input projection (encoder width -> dec_dim) of
    the K visible tokens; full and prompting include the prediction head
    over all N tokens.
    """
    check_ratio(r)
    d = cfg.dec_dim
    f = cfg.ffn_dim
    enc_dim = d if enc_dim is None else enc_dim
    k = num_visible(n, r)
    m = n - k
    embed = k * enc_dim * d
    if cfg.variant == "full":
        per_proj, per_attn, per_ffn = 4 * n * d * d, 2 * n * n * d, 2 * n * d * f
        head = n * d * cfg.d_target
    elif cfg.variant == "prompting":
        per_proj = 4 * m * d * d + (2 * k * d * d if cfg.project_prompts else 0)
        per_attn = 2 * m * n * d
        per_ffn = 2 * m * d * f
        head = n * d * cfg.d_target
    else:
        per_proj = per_attn = per_ffn = 0
        head = k * d * cfg.d_target
    depth = cfg.depth if cfg.variant != "none" else 0
    attention = depth * per_attn
    ffn = depth * per_ffn
    projection = depth * per_proj + embed + head
    return FlopReport(cfg.variant, n, r, depth, attention, ffn, projection, attention + ffn + projection)


def block_macs(report: FlopReport, cfg: DecoderConfig, enc_dim: int | None = None) -> int:
    """MACs spent inside decoder blocks (excludes input projection and head)."""
    zero = decoder_flops(DecoderConfig(**{**asdict(cfg), "depth": 0}), report.n, report.r, enc_dim)
    return report.total_macs - zero.total_macs


def flop_ratio(cfg: DecoderConfig, n: int, r: float, enc_dim: int | None = None) -> float:
    """prompting / full MAC ratio at the same depth and width."""
    base = asdict(cfg)
    prompting = decoder_flops(DecoderConfig(**{**base, "variant": "prompting"}), n, r, enc_dim)
    full = decoder_flops(DecoderConfig(**{**base, "variant": "full"}), n, r, enc_dim)
    return prompting.total_macs / full.total_macs


def reports_csv(reports) -> str:
    buf = io.StringIO()
    fields = list(FlopReport.__dataclass_fields__)
    w = csv.DictWriter(buf, fieldnames=fields)
    w.writeheader()
    for rep in reports:
        w.writerow(rep.as_row())
    return buf.getvalue()


# ---------------------------------------------------------------------------
# sampler diagnostics

EXACT_LIMIT = 20


def inclusion_probabilities(probs, k: int) -> np.ndarray:
    """Exact P(index i is among the first k sequential draws without replacement).

    Dynamic programme over subsets, so only for N <= 20. Once all remaining
    weight is zero, draws are uniform over the untaken indices.
    """
    w = np.asarray(probs, dtype=np.float64)
    n = w.shape[0]
    if n > EXACT_LIMIT:
        raise ValueError(f"exact inclusion probabilities limited to N <= {EXACT_LIMIT}, got {n}")
    total = w.sum()
    size = 1 << n
    subsets = np.arange(size)
    popcount = np.zeros(size, dtype=np.int64)
    weight = np.zeros(size)
    for i in range(n):
        bit = (subsets >> i) & 1
        popcount += bit
        weight += bit * w[i]
    p = np.zeros(size)
    p[0] = 1.0
    for j in range(k):
        layer = subsets[(popcount == j) & (p > 0)]
        remaining = total - weight[layer]
        depleted = remaining <= 1e-15 * max(total, 1.0)
        for i in range(n):
            free = ((layer >> i) & 1) == 0
            src = layer[free]
            if not src.size:
                continue
            step = np.where(depleted[free], 1.0 / (n - j), w[i] / np.where(depleted[free], 1.0, remaining[free]))
            step = np.where(depleted[free] | (w[i] > 0), step, 0.0)
            np.add.at(p, src | (1 << i), p[src] * step)
    final = subsets[popcount == k]
    pi = np.zeros(n)
    for i in range(n):
        pi[i] = p[final[((final >> i) & 1) == 1]].sum()
    return pi


def proportional_expectation(probs, k: int) -> np.ndarray:
    """k * s, with entries above 1 capped and the excess redistributed."""
    s = np.asarray(probs, dtype=np.float64)
    s = s / s.sum()
    pi = np.zeros_like(s)
    free = np.ones(s.shape, dtype=bool)
    budget = float(k)
    while True:
        share = budget * s[free] / s[free].sum() if s[free].sum() > 0 else np.full(free.sum(), budget / free.sum())
        over = share > 1.0
        if not over.any():
            pi[free] = share
            return pi
        idx = np.flatnonzero(free)[over]
        pi[idx] = 1.0
        free[idx] = False
        budget -= len(idx)


@dataclass
class SamplerStats:
    frequencies: np.ndarray  # fraction of trials each index was visible
    expected: np.ndarray
    chi2: float
    dof: int
    p_value: float
    trials: int
    exact: bool


def visibility_chi2(counts: np.ndarray, expected: np.ndarray, trials: int) -> tuple[float, int, float]:
    """Goodness of fit of per-index visibility counts.

    Each count is Binomial(trials, pi_i); the counts sum to K * trials, which
    removes one degree of freedom. Indices with pi in {0, 1} are deterministic
    and only checked for exact agreement.
    """
    counts = np.asarray(counts, dtype=np.float64)
    pi = np.asarray(expected, dtype=np.float64)
    det = (pi <= 1e-12) | (pi >= 1 - 1e-12)
    if det.any() and not np.allclose(counts[det], trials * np.round(pi[det])):
        return float("inf"), 0, 0.0
    live = ~det
    n = int(live.sum())
    if n < 2:
        return 0.0, 0, 1.0
    var = trials * pi[live] * (1 - pi[live])
    chi2 = float(((counts[live] - trials * pi[live]) ** 2 / var).sum() * (n - 1) / n)
    dof = n - 1
    return chi2, dof, float(stats.chi2.sf(chi2, dof))


def sampler_stats(s_class, r: float, trials: int, seed) -> SamplerStats:
    """Monte-Carlo visibility frequencies of semantic sampling and their fit to
    the exact inclusion probabilities (N <= 20) or, for larger N, to the
    capped s_class-proportional expectation."""
    if trials < 1000:
        raise ValueError(f"trials must be >= 1000, got {trials}")
    s = np.asarray(s_class, dtype=np.float64)
    n = s.shape[0]
    k = num_visible(n, r)
    visible = sample_many(s, r, trials, seed)
    counts = np.bincount(visible.ravel(), minlength=n)
    exact = n <= EXACT_LIMIT
    expected = inclusion_probabilities(s, k) if exact else proportional_expectation(s, k)
    chi2, dof, p = visibility_chi2(counts, expected, trials)
    return SamplerStats(counts / trials, expected, chi2, dof, p, trials, exact)


def homogeneity_test(counts_a, counts_b) -> float:
    """p-value of a chi-square test that two per-index count vectors share one
    distribution over indices. Conservative for without-replacement draws."""
    table = np.stack([np.asarray(counts_a), np.asarray(counts_b)])
    table = table[:, table.sum(axis=0) > 0]
    return float(stats.chi2_contingency(table)[1])
