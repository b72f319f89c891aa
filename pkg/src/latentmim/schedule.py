"""Learning-rate schedule: linear warmup then cosine decay to zero."""

from __future__ import annotations

import math
from dataclasses import dataclass


def scaled_lr(base_lr: float, batch_size: int) -> float:
    """Peak learning rate under the linear scaling rule ``base_lr * batch / 256``."""
    return base_lr * batch_size / 256


@dataclass(frozen=True)
class WarmupCosine:
    peak_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 1 or not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"need 0 <= warmup_steps <= total_steps, total >= 1; got {self.warmup_steps}, {self.total_steps}")

    def __call__(self, step: int) -> float:
        return lr_at(step, self.peak_lr, self.warmup_steps, self.total_steps)


def lr_at(step: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """0 at step 0, ``peak_lr`` at the end of warmup, exactly 0 at ``total_steps``."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step >= total_steps:
        return 0.0
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = total_steps - warmup_steps
    progress = (step - warmup_steps) / span
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
