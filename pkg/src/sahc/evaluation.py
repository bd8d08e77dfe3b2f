"""Phase-recognition metrics, online evaluation with a causality certificate,
and prediction-ribbon export (CSV plus a standalone SVG).

Precision, recall, and Jaccard are computed per phase from frame-index sets
(ground-truth frames of the phase vs predicted frames of the phase) and
averaged over phases that occur in either sequence; dataset numbers are the
unweighted mean and population standard deviation over videos.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import FeatureSequence
from .model import ModelConfig, ModelParams, StreamState, forward, stream_step


class MetricsError(ValueError):
    """Prediction/ground-truth sequences unusable for scoring."""


@dataclass
class PhaseScores:
    precision: float
    recall: float
    jaccard: float


@dataclass
class VideoMetrics:
    video_id: str
    accuracy: float
    precision: float
    recall: float
    jaccard: float
    per_phase: dict[int, PhaseScores] = field(default_factory=dict)


def video_metrics(pred, gt, c: int, video_id: str = "") -> VideoMetrics:
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.size != gt.size:
        raise MetricsError(f"{video_id or 'video'}: {pred.size} predictions "
                           f"for {gt.size} labels")
    if pred.size == 0:
        raise MetricsError(f"{video_id or 'video'}: empty sequence")
    for name, arr in (("prediction", pred), ("label", gt)):
        if arr.min() < 0 or arr.max() >= c:
            raise MetricsError(f"{video_id or 'video'}: {name} outside [0, {c})")

    accuracy = float(np.mean(pred == gt))
    per_phase: dict[int, PhaseScores] = {}
    for ph in range(c):
        in_gt = gt == ph
        in_pred = pred == ph
        n_gt = int(in_gt.sum())
        n_pred = int(in_pred.sum())
        if n_gt == 0 and n_pred == 0:
            continue  # phase absent from both: excluded, not a zero
        inter = int(np.sum(in_gt & in_pred))
        union = int(np.sum(in_gt | in_pred))
        per_phase[ph] = PhaseScores(
            precision=inter / n_pred if n_pred else 0.0,
            recall=inter / n_gt if n_gt else 0.0,
            jaccard=inter / union if union else 0.0)
    scores = list(per_phase.values())
    return VideoMetrics(
        video_id=video_id,
        accuracy=accuracy,
        precision=float(np.mean([s.precision for s in scores])),
        recall=float(np.mean([s.recall for s in scores])),
        jaccard=float(np.mean([s.jaccard for s in scores])),
        per_phase=per_phase)


@dataclass
class MetricsReport:
    videos: list[VideoMetrics]
    mean: dict[str, float]
    std: dict[str, float]  # population std over videos


METRIC_KEYS = ("accuracy", "precision", "recall", "jaccard")


def dataset_metrics(videos: Sequence[VideoMetrics]) -> MetricsReport:
    if not videos:
        raise MetricsError("no videos to aggregate")
    mean = {}
    std = {}
    for key in METRIC_KEYS:
        vals = np.array([getattr(v, key) for v in videos], dtype=np.float64)
        mean[key] = float(vals.mean())
        std[key] = float(vals.std())
    return MetricsReport(videos=list(videos), mean=mean, std=std)


def format_mean_std(mean: float, std: float) -> str:
    """Percent with one decimal, e.g. 0.916 / 0.078 -> '91.6 ± 7.8'."""
    return f"{100.0 * mean:.1f} ± {100.0 * std:.1f}"


def format_report(report: MetricsReport) -> str:
    lines = ["metric      mean ± std (%)"]
    for key in METRIC_KEYS:
        lines.append(f"{key:<10}  {format_mean_std(report.mean[key], report.std[key])}")
    lines.append("")
    lines.append("video            AC      PR      RE      JA")
    for v in report.videos:
        lines.append(f"{v.video_id:<15} {v.accuracy:6.3f}  {v.precision:6.3f}  "
                     f"{v.recall:6.3f}  {v.jaccard:6.3f}")
    return "\n".join(lines) + "\n"


def report_kv(report: MetricsReport) -> str:
    """Machine-readable key=value dump at full float precision."""
    lines = []
    for key in METRIC_KEYS:
        lines.append(f"mean.{key}={report.mean[key]!r}")
        lines.append(f"std.{key}={report.std[key]!r}")
    for v in report.videos:
        for key in METRIC_KEYS:
            lines.append(f"video.{v.video_id}.{key}={getattr(v, key)!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# online evaluation and the causality certificate


class CausalityViolation(AssertionError):
    """A future frame changed an already-made prediction."""


@dataclass
class CausalityCertificate:
    tested_timesteps: list[int]
    passed: bool
    earliest_violation: Optional[int] = None


@dataclass
class OnlineResult:
    metrics: VideoMetrics
    probs: np.ndarray           # [T, C] streamed probabilities
    certificate: CausalityCertificate


def causality_certificate(features: np.ndarray, baseline_probs: np.ndarray,
                          params: ModelParams, config: ModelConfig,
                          n_probe: int = 20, seed: int = 0) -> CausalityCertificate:
    """Perturb frames strictly after a probe timestep t with fresh noise and
    require the model's probability rows 0..t to be unchanged bit for bit."""
    t_total = features.shape[0]
    if t_total < 2:
        raise MetricsError("need at least 2 frames to probe causality")
    rng = np.random.default_rng(seed)
    n_probe = min(n_probe, t_total - 1)
    probes = sorted(int(t) for t in rng.choice(t_total - 1, size=n_probe, replace=False))
    earliest: Optional[int] = None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for t in probes:
            mutated = features.copy()
            mutated[t + 1:] = rng.standard_normal(
                mutated[t + 1:].shape).astype(features.dtype) * 3.0
            out = forward(mutated, params, config, mode="eval")
            probs = _softmax_rows(out.frame_logits.data)
            same = np.array_equal(probs[:t + 1], baseline_probs[:t + 1])
            if not same:
                diff = np.where(np.any(probs[:t + 1] != baseline_probs[:t + 1], axis=1))[0]
                first = int(diff[0])
                if earliest is None or first < earliest:
                    earliest = first
    return CausalityCertificate(tested_timesteps=probes,
                                passed=earliest is None,
                                earliest_violation=earliest)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def online_evaluate(seq: FeatureSequence, params: ModelParams, config: ModelConfig,
                    n_probe: int = 20, seed: int = 0,
                    check_certificate: bool = True) -> OnlineResult:
    """Stream the video frame by frame, score the argmax phases, and (optionally)
    run the perturbation certificate against the offline forward pass."""
    state = StreamState()
    rows = []
    for t in range(seq.t):
        probs, state = stream_step(seq.features[t], state, params, config)
        rows.append(probs)
    streamed = np.stack(rows, axis=0)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        offline = forward(seq.features, params, config, mode="eval")
    offline_probs = _softmax_rows(offline.frame_logits.data)
    if not np.allclose(streamed, offline_probs, rtol=1e-5, atol=1e-6):
        worst = int(np.argmax(np.abs(streamed - offline_probs).max(axis=1)))
        raise CausalityViolation(
            f"{seq.video_id}: streamed probabilities diverge from the offline "
            f"pass (worst at frame {worst})")

    cert = CausalityCertificate(tested_timesteps=[], passed=True)
    if check_certificate:
        cert = causality_certificate(seq.features, offline_probs, params, config,
                                     n_probe=n_probe, seed=seed)
        if not cert.passed:
            raise CausalityViolation(
                f"{seq.video_id}: future frames changed the prediction at "
                f"frame {cert.earliest_violation}")

    preds = np.argmax(streamed, axis=1)
    metrics = video_metrics(preds, seq.labels, config.c, video_id=seq.video_id)
    return OnlineResult(metrics=metrics, probs=streamed, certificate=cert)


# ---------------------------------------------------------------------------
# ribbon export

# colorblind-leaning palette, cycled when C exceeds its length
_PALETTE = ["#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377",
            "#bbbbbb", "#222255", "#225555", "#a0522d", "#ff8c00", "#6b8e23",
            "#8b008b", "#2f4f4f", "#dc143c", "#00ced1"]


def phase_color(phase: int) -> str:
    return _PALETTE[phase % len(_PALETTE)]


def _runs(labels: np.ndarray) -> list[tuple[int, int, int]]:
    """(start, end_exclusive, value) runs of a 1-d int array."""
    out = []
    start = 0
    for i in range(1, labels.size + 1):
        if i == labels.size or labels[i] != labels[start]:
            out.append((start, i, int(labels[start])))
            start = i
    return out


def ribbon_export(out_prefix, pred, gt, probs: np.ndarray) -> tuple[Path, Path]:
    """Write <prefix>.csv (frame,gt,pred,per-class probabilities) and
    <prefix>.svg (GT ribbon, prediction ribbon, confidence trace)."""
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    probs = np.asarray(probs, dtype=np.float64)
    t_total = pred.size
    if gt.size != t_total or probs.shape[0] != t_total:
        raise MetricsError("ribbon export needs equally long pred/gt/probs")
    c = probs.shape[1]

    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_prefix.with_suffix(".csv")
    svg_path = out_prefix.with_suffix(".svg")

    header = "frame,gt,pred," + ",".join(f"p{j}" for j in range(c))
    lines = [header]
    for t in range(t_total):
        pp = ",".join(f"{probs[t, j]:.6f}" for j in range(c))
        lines.append(f"{t},{gt[t]},{pred[t]},{pp}")
    csv_path.write_text("\n".join(lines) + "\n")

    width, band_h, gap, trace_h, margin = 960.0, 42.0, 14.0, 110.0, 46.0
    height = margin + band_h * 2 + gap * 2 + trace_h + margin
    sx = width / t_total

    def band(y: float, labels: np.ndarray, title: str) -> list[str]:
        parts = [f'<text x="0" y="{y - 4:.1f}" font-size="13" '
                 f'font-family="sans-serif">{title}</text>']
        for s, e, v in _runs(labels):
            parts.append(f'<rect x="{s * sx:.2f}" y="{y:.1f}" '
                         f'width="{(e - s) * sx:.2f}" height="{band_h:.1f}" '
                         f'fill="{phase_color(v)}"><title>phase {v}: frames '
                         f'{s}..{e - 1}</title></rect>')
        return parts

    conf = probs[np.arange(t_total), pred]
    y0 = margin + 2 * (band_h + gap)
    pts = " ".join(f"{(t + 0.5) * sx:.2f},{y0 + trace_h * (1.0 - conf[t]):.2f}"
                   for t in range(t_total))

    svg = ['<svg xmlns="http://www.w3.org/2000/svg" '
           f'width="{width:.0f}" height="{height:.0f}" '
           f'viewBox="0 0 {width:.0f} {height:.0f}">',
           '<rect width="100%" height="100%" fill="white"/>']
    svg += band(margin, gt, "ground truth")
    svg += band(margin + band_h + gap, pred, "prediction")
    svg.append(f'<text x="0" y="{y0 - 4:.1f}" font-size="13" '
               f'font-family="sans-serif">confidence of predicted phase</text>')
    svg.append(f'<rect x="0" y="{y0:.1f}" width="{width:.0f}" '
               f'height="{trace_h:.0f}" fill="none" stroke="#999"/>')
    svg.append(f'<polyline points="{pts}" fill="none" stroke="#333" stroke-width="1"/>')
    svg.append('</svg>')
    svg_path.write_text("\n".join(svg) + "\n")
    return csv_path, svg_path
