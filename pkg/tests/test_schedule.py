import math

import pytest
from hypothesis import given, strategies as st

from latentmim.schedule import WarmupCosine, lr_at, scaled_lr


def test_scaling_rule():
    assert scaled_lr(1.5e-4, 4096) == pytest.approx(2.4e-3)
    assert scaled_lr(1.5e-4, 256) == pytest.approx(1.5e-4)


def test_endpoints():
    peak = scaled_lr(1.5e-4, 4096)
    assert lr_at(0, peak, 40, 400) == 0.0
    assert lr_at(40, peak, 40, 400) == pytest.approx(peak)
    assert abs(lr_at(400, peak, 40, 400)) < 1e-12
    assert abs(lr_at(399, peak, 40, 400)) < peak * 1e-3


def test_warmup_is_linear_and_decay_is_cosine():
    assert lr_at(10, 1.0, 40, 400) == pytest.approx(0.25)
    assert lr_at(220, 1.0, 40, 400) == pytest.approx(0.5)
    assert lr_at(40 + 90, 1.0, 40, 400) == pytest.approx(0.5 * (1 + math.cos(math.pi / 4)))


def test_no_warmup():
    assert lr_at(0, 2.0, 0, 10) == pytest.approx(2.0)


def test_negative_step_rejected():
    with pytest.raises(ValueError):
        lr_at(-1, 1.0, 1, 10)


def test_schedule_validation():
    with pytest.raises(ValueError):
        WarmupCosine(1.0, 20, 10)


@given(total=st.integers(2, 500), frac=st.floats(0, 1), step=st.integers(0, 600))
def test_bounded_and_monotone_after_warmup(total, frac, step):
    warmup = int(frac * total)
    sched = WarmupCosine(1.0, warmup, total)
    lr = sched(step)
    assert 0.0 <= lr <= 1.0 + 1e-12
    if step >= warmup:
        assert sched(step + 1) <= lr + 1e-12
