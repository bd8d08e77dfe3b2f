"""Hierarchical training objective: frame cross-entropy, per-level segment
cross-entropy, and a temporal smoothing penalty on successive probability rows.

Every cross-entropy term is normalized by its own sequence length, so levels
with few segments are not drowned out by the frame term.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tz
from .tensor import Tensor


class LossError(ValueError):
    """Labels and logits disagree on shape or range."""


@dataclass
class LossConfig:
    beta: float = 1.0      # weight on segment CE and on segment smoothing terms
    lamb: float = 1.0      # weight on the smoothing penalty
    eps_log: float = 1e-8  # probability floor inside log


@dataclass
class LabelHierarchy:
    """Frame labels plus their majority-vote downsamplings, one per level."""

    y0: np.ndarray
    levels: list[np.ndarray] = field(default_factory=list)


def downsample_labels(y, k: int, m: int) -> LabelHierarchy:
    """Label for segment p at level i is the majority class of frames
    [p*k^i, (p+1)*k^i) of y; ties go to the class appearing earliest in the
    window. Levels stop once floor(T / k^i) reaches zero.
    """
    y0 = np.asarray(y, dtype=np.int64).reshape(-1)
    if y0.size == 0:
        raise LossError("empty label sequence")
    if k < 2:
        raise LossError(f"downsample window must be >= 2, got {k}")
    levels: list[np.ndarray] = []
    for i in range(1, m + 1):
        span = k ** i
        n = y0.size // span
        if n == 0:
            break
        lab = np.empty(n, dtype=np.int64)
        for p in range(n):
            win = y0[p * span:(p + 1) * span]
            counts = np.bincount(win)
            best = counts.max()
            # earliest first appearance among the tied classes
            for v in win:
                if counts[v] == best:
                    lab[p] = v
                    break
        levels.append(lab)
    return LabelHierarchy(y0=y0, levels=levels)


def _one_hot(labels: np.ndarray, c: int, dtype) -> Tensor:
    if labels.min() < 0 or labels.max() >= c:
        bad = int(labels[(labels < 0) | (labels >= c)][0])
        raise LossError(f"label {bad} outside [0, {c})")
    oh = np.zeros((labels.size, c), dtype=dtype)
    oh[np.arange(labels.size), labels] = 1.0
    return Tensor(oh)


def frame_ce(logits: Tensor, labels, eps_log: float = 1e-8) -> Tensor:
    """Mean negative log-probability of the true class, with the probability
    clamped to at least eps_log before the log."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    t_len, c = logits.shape
    if y.size != t_len:
        raise LossError(f"{y.size} labels for {t_len} prediction rows")
    probs = tz.softmax(logits)
    logp = tz.log(probs, floor=eps_log)
    picked = tz.mul(logp, _one_hot(y, c, logits.dtype))
    return tz.scale(tz.sum_all(picked), -1.0 / t_len)


def segment_ce(segment_logits: Sequence[Tensor], segment_labels: Sequence[np.ndarray],
               beta: float = 1.0, eps_log: float = 1e-8) -> Tensor:
    """beta * sum over levels of that level's mean cross-entropy. Exactly zero
    when beta is 0 or there are no levels."""
    if len(segment_logits) != len(segment_labels):
        raise LossError(
            f"{len(segment_logits)} logit levels but {len(segment_labels)} label levels")
    if beta == 0.0 or not segment_logits:
        dtype = segment_logits[0].dtype if segment_logits else np.float32
        return Tensor(np.asarray(0.0, dtype=dtype))
    total = None
    for lg, lab in zip(segment_logits, segment_labels):
        term = frame_ce(lg, lab, eps_log)
        total = term if total is None else tz.add(total, term)
    return tz.scale(total, beta)


def _smooth_term(probs: Tensor) -> Tensor:
    """Mean squared difference of successive probability rows, 1/(T*C) normalized."""
    t_len, c = probs.shape
    if t_len < 2:
        return Tensor(np.asarray(0.0, dtype=probs.dtype))
    d = tz.add(tz.slice_time(probs, 1, t_len),
               tz.scale(tz.slice_time(probs, 0, t_len - 1), -1.0))
    return tz.scale(tz.sum_all(tz.mul(d, d)), 1.0 / (t_len * c))


def smooth_loss(frame_probs: Tensor, segment_probs: Sequence[Tensor],
                beta: float = 1.0) -> Tensor:
    """Smoothing over the frame probabilities plus beta times each level's term."""
    total = _smooth_term(frame_probs)
    if beta != 0.0:
        for p in segment_probs:
            total = tz.add(total, tz.scale(_smooth_term(p), beta))
    return total


def total_loss(output, labels: LabelHierarchy, cfg: LossConfig) -> tuple[Tensor, dict]:
    """Combined objective and a float breakdown of its unweighted parts.

    ``output`` is a forward result carrying .frame_logits and .segment_logits.
    total = frame_ce + beta * segment_ce_sum + lamb * smoothing
    With beta = lamb = 0 the total equals the frame term bitwise.
    """
    frame_logits: Tensor = output.frame_logits
    segment_logits: Sequence[Tensor] = output.segment_logits
    n_levels = len(segment_logits)
    if n_levels > len(labels.levels):
        raise LossError(
            f"{n_levels} segment levels but only {len(labels.levels)} label levels")
    l_frame = frame_ce(frame_logits, labels.y0, cfg.eps_log)
    l_seg = segment_ce(segment_logits, labels.levels[:n_levels], cfg.beta, cfg.eps_log)

    frame_probs = tz.softmax(frame_logits)
    seg_probs = [tz.softmax(lg) for lg in segment_logits]
    l_smooth = smooth_loss(frame_probs, seg_probs, cfg.beta)

    total = tz.add(l_frame, l_seg)
    if cfg.lamb != 0.0:
        total = tz.add(total, tz.scale(l_smooth, cfg.lamb))
    breakdown = {
        "frame_ce": float(l_frame.item()),
        "segment_ce": float(l_seg.item()),
        "smooth": float(l_smooth.item()) if cfg.lamb != 0.0 else 0.0,
        "smooth_raw": float(l_smooth.item()),
        "total": float(total.item()),
    }
    return total, breakdown
