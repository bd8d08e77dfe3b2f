"""Loss oracles: closed-form uniform-logit anchors, hand downsampling cases,
the exact collapse to frame CE, and finite-difference agreement."""

from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sahc import tensor as tz
from sahc.losses import (LabelHierarchy, LossConfig, LossError, downsample_labels,
                         frame_ce, segment_ce, smooth_loss, total_loss)
from sahc.tensor import Tensor, grad_check

RNG = np.random.default_rng(31337)


def out_of(frame_logits, segment_logits=()):
    return SimpleNamespace(frame_logits=frame_logits,
                           segment_logits=list(segment_logits))


# ---------------------------------------------------------------------------
# downsampling


def test_downsample_majority():
    h = downsample_labels([0, 0, 1], k=3, m=1)
    assert h.levels[0].tolist() == [0]


def test_downsample_tie_earliest():
    h = downsample_labels([2, 2, 3, 3], k=4, m=1)
    assert h.levels[0].tolist() == [2]
    h = downsample_labels([3, 3, 2, 2], k=4, m=1)
    assert h.levels[0].tolist() == [3]


def test_downsample_clean_windows():
    h = downsample_labels([0] * 7 + [1] * 7, k=7, m=1)
    assert h.levels[0].tolist() == [0, 1]


def test_downsample_level_lengths():
    y = RNG.integers(0, 5, size=500)
    h = downsample_labels(y, k=7, m=3)
    assert [lv.size for lv in h.levels] == [71, 10, 1]


def test_downsample_single_class_constant_everywhere():
    h = downsample_labels(np.full(100, 3), k=3, m=3)
    for lv in h.levels:
        assert (lv == 3).all()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=4), min_size=2, max_size=60),
       st.sampled_from([2, 3, 5]))
def test_downsample_matches_brute_force(y, k):
    h = downsample_labels(y, k, m=2)
    y = np.asarray(y)
    for i, lv in enumerate(h.levels, start=1):
        span = k ** i
        assert lv.size == len(y) // span
        for p, got in enumerate(lv):
            win = list(y[p * span:(p + 1) * span])
            best = max(set(win), key=lambda v: (win.count(v), -win.index(v)))
            assert got == best


# ---------------------------------------------------------------------------
# cross-entropy anchors


def test_uniform_logits_give_ln_c():
    for c, anchor in ((8, 2.07944), (7, 1.94591)):
        logits = Tensor(np.zeros((12, c), dtype=np.float64))
        y = RNG.integers(0, c, size=12)
        assert abs(frame_ce(logits, y).item() - anchor) < 1e-5
        assert abs(frame_ce(logits, y).item() - np.log(c)) < 1e-12


def test_confident_correct_predictions_near_zero_loss():
    y = np.array([0, 1, 2])
    logits = Tensor(np.eye(3) * 50.0)
    assert frame_ce(logits, y).item() < 1e-6


def test_frame_ce_rejects_out_of_range_label():
    logits = Tensor(np.zeros((3, 4)))
    with pytest.raises(LossError, match="outside"):
        frame_ce(logits, [0, 1, 4])


def test_frame_ce_clamp_prevents_infinite_loss():
    logits = Tensor(np.array([[100.0, -100.0]]))
    loss = frame_ce(logits, [1], eps_log=1e-8).item()
    assert np.isfinite(loss)
    assert abs(loss - (-np.log(1e-8))) < 1e-3


def test_segment_ce_beta_zero_annihilates():
    lg = [Tensor(RNG.standard_normal((5, 3)))]
    assert segment_ce(lg, [np.zeros(5, dtype=int)], beta=0.0).item() == 0.0


def test_segment_ce_single_level_reduces_to_frame_ce():
    lg = Tensor(RNG.standard_normal((9, 4)), dtype=np.float64)
    y = RNG.integers(0, 4, size=9)
    a = segment_ce([lg], [y], beta=0.7).item()
    b = 0.7 * frame_ce(lg, y).item()
    assert abs(a - b) < 1e-12


def test_segment_ce_uniform_three_levels():
    levels = [Tensor(np.zeros((n, 8), dtype=np.float64)) for n in (71, 10, 1)]
    labels = [RNG.integers(0, 8, size=n) for n in (71, 10, 1)]
    got = segment_ce(levels, labels, beta=1.0).item()
    assert abs(got - 3 * np.log(8)) < 1e-10


# ---------------------------------------------------------------------------
# smoothing


def test_smooth_constant_probabilities_zero():
    p = Tensor(np.tile(np.array([0.2, 0.8]), (10, 1)))
    assert smooth_loss(p, [], beta=1.0).item() == 0.0


def test_smooth_hand_value():
    p = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert abs(smooth_loss(p, [], beta=0.0).item() - 0.5) < 1e-12


def test_smooth_single_frame_is_zero():
    p = Tensor(np.array([[0.3, 0.7]]))
    assert smooth_loss(p, [], beta=1.0).item() == 0.0


def test_smooth_includes_segment_levels_weighted():
    p0 = Tensor(np.tile(np.array([0.5, 0.5]), (4, 1)))
    p1 = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    got = smooth_loss(p0, [p1], beta=0.25).item()
    assert abs(got - 0.25 * 0.5) < 1e-12


# ---------------------------------------------------------------------------
# combination


def _random_instance(t=12, c=4, k=3, m=1, dtype=np.float64):
    frame = Tensor(RNG.standard_normal((t, c)), dtype=dtype)
    segs = [Tensor(RNG.standard_normal((t // k ** i, c)), dtype=dtype)
            for i in range(1, m + 1)]
    y = RNG.integers(0, c, size=t)
    return out_of(frame, segs), downsample_labels(y, k, m)


def test_total_collapses_to_frame_ce_exactly():
    out, hier = _random_instance()
    total, br = total_loss(out, hier, LossConfig(beta=0.0, lamb=0.0))
    anchor = frame_ce(out.frame_logits, hier.y0).item()
    assert total.item() == anchor
    assert br["segment_ce"] == 0.0


def test_lambda_scales_smoothing_linearly():
    out, hier = _random_instance()
    t0, _ = total_loss(out, hier, LossConfig(beta=1.0, lamb=0.0))
    t5, br = total_loss(out, hier, LossConfig(beta=1.0, lamb=0.5))
    assert np.isclose(t5.item() - t0.item(), 0.5 * br["smooth_raw"], rtol=1e-9)


def test_lambda_zero_logs_smooth_as_zero_but_reports_raw():
    out, hier = _random_instance()
    _, br = total_loss(out, hier, LossConfig(beta=1.0, lamb=0.0))
    assert br["smooth"] == 0.0
    assert br["smooth_raw"] > 0.0


def test_total_at_least_frame_ce():
    for _ in range(5):
        out, hier = _random_instance(m=2, t=27)
        total, br = total_loss(out, hier, LossConfig())
        assert total.item() >= br["frame_ce"] - 1e-12
        assert all(v >= 0 for v in br.values())


def test_mismatched_level_counts_rejected():
    out, hier = _random_instance(m=1)
    hier.levels = []
    with pytest.raises(LossError, match="level"):
        total_loss(out, hier, LossConfig())


def test_total_loss_gradient_matches_finite_differences():
    y = RNG.integers(0, 4, size=12)
    hier = downsample_labels(y, k=3, m=1)
    seg = Tensor(RNG.standard_normal((4, 4)), dtype=np.float64)

    def f(frame_logits):
        total, _ = total_loss(out_of(frame_logits, [seg]), hier, LossConfig())
        return total

    for _ in range(5):
        x = Tensor(RNG.standard_normal((12, 4)), requires_grad=True, dtype=np.float64)
        assert grad_check(f, x) < 1e-4

    def g(seg_logits):
        total, _ = total_loss(out_of(frame, [seg_logits]), hier, LossConfig())
        return total

    for _ in range(5):
        frame = Tensor(RNG.standard_normal((12, 4)), dtype=np.float64)
        x = Tensor(RNG.standard_normal((4, 4)), requires_grad=True, dtype=np.float64)
        assert grad_check(g, x) < 1e-4
