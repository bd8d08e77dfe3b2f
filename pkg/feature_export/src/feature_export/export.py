"""Turn a video file or a directory of frame images into an .sfb feature file.

Pipeline: enumerate source frames, pick the subsampled indices for the target
rate, decode only those frames, push them through a frozen image encoder in
batches, and write features + per-frame labels in the shared byte layout.

Labels arrive as a CSV with header `frame_index,phase_id` and exactly one row
per SOURCE frame; exported frames take the label of the source frame they were
sampled from, so every exported frame is covered by construction.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import cv2
import numpy as np

from .encoder import load_encoder
from .sfbio import sfb_bytes

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class ExportError(ValueError):
    """Bad spec, undecodable input, or label/frame disagreement."""


@dataclass
class ExportSpec:
    input: str                  # video file or directory of frame images
    labels: str                 # CSV: frame_index,phase_id (one row per source frame)
    out: str                    # .sfb destination
    rate: float = 5.0           # target frames per second
    src_fps: Optional[float] = None  # required for directories; overrides video metadata
    encoder: str = "resnet50"
    weights: str = "auto"       # auto | none | path to a state dict
    batch: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.rate <= 0:
            raise ExportError(f"target rate must be > 0, got {self.rate}")
        if self.src_fps is not None and self.src_fps <= 0:
            raise ExportError(f"source fps must be > 0, got {self.src_fps}")
        if self.batch < 1:
            raise ExportError(f"batch size must be >= 1, got {self.batch}")


@dataclass
class ExportResult:
    out: str
    t: int
    d_in: int
    c: int
    n_source: int
    pretrained: bool


def subsample_indices(n_source: int, src_fps: float, rate: float) -> list[int]:
    """Source indices kept when resampling n_source frames from src_fps to
    rate: T = floor(n_source * rate / src_fps) frames, the i-th taken at
    source index floor(i * src_fps / rate)."""
    if n_source < 1:
        raise ExportError("no source frames")
    t_out = int(n_source * rate / src_fps)
    return [int(i * src_fps / rate) for i in range(t_out)]


# ---------------------------------------------------------------------------
# frame sources


def _natural_key(name: str):
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", name)]


def _list_frame_files(root: Path) -> list[Path]:
    files = [p for p in root.iterdir()
             if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file()]
    if not files:
        raise ExportError(f"{root}: no frame images "
                          f"({'/'.join(s[1:] for s in IMAGE_SUFFIXES)}) found")
    return sorted(files, key=lambda p: _natural_key(p.name))


def _read_image(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise ExportError(f"cannot decode image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def _dir_frames(root: Path, wanted: list[int]) -> Iterator[np.ndarray]:
    files = _list_frame_files(root)
    for idx in wanted:
        yield _read_image(files[idx])


def _video_frames(path: Path, wanted: list[int]) -> Iterator[np.ndarray]:
    # wanted is nondecreasing and may repeat indices when upsampling
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise ExportError(f"cannot open video {path}")
    try:
        nxt = 0
        pos = 0
        while nxt < len(wanted):
            ok, frame = cap.read()
            if not ok:
                raise ExportError(f"{path.name}: decode stopped at frame {pos}, "
                                  f"still needed {len(wanted) - nxt} frames")
            if pos == wanted[nxt]:
                rgb = cv2.cvtColor(frame, cv2.COLOR_BGR2RGB)
                while nxt < len(wanted) and wanted[nxt] == pos:
                    yield rgb
                    nxt += 1
            pos += 1
    finally:
        cap.release()


def _probe_source(spec: ExportSpec) -> tuple[Path, int, float, bool]:
    """Returns (path, n_source, src_fps, is_dir)."""
    src = Path(spec.input)
    if src.is_dir():
        n = len(_list_frame_files(src))
        if spec.src_fps is None:
            raise ExportError(f"{src}: frame directories carry no rate metadata; "
                              f"pass the source fps explicitly")
        return src, n, spec.src_fps, True
    if not src.exists():
        raise ExportError(f"input not found: {src}")
    cap = cv2.VideoCapture(str(src))
    if not cap.isOpened():
        raise ExportError(f"cannot open video {src}")
    n = int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
    meta_fps = float(cap.get(cv2.CAP_PROP_FPS))
    cap.release()
    fps = spec.src_fps if spec.src_fps is not None else meta_fps
    if fps <= 0:
        raise ExportError(f"{src.name}: no usable fps in metadata; "
                          f"pass the source fps explicitly")
    if n < 1:
        raise ExportError(f"{src.name}: container reports no frames")
    return src, n, fps, False


# ---------------------------------------------------------------------------
# labels


def load_label_csv(path, n_source: int) -> tuple[np.ndarray, int]:
    """Parse `frame_index,phase_id` rows covering every source frame exactly
    once; returns (labels by source index, class count)."""
    p = Path(path)
    if not p.exists():
        raise ExportError(f"label CSV not found: {p}")
    with open(p, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ExportError(f"{p.name}: empty label CSV")
        if [h.strip() for h in header] != ["frame_index", "phase_id"]:
            raise ExportError(f"{p.name}: expected header frame_index,phase_id, "
                              f"got {','.join(header)!r}")
        rows = []
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append((int(row[0]), int(row[1])))
            except (ValueError, IndexError):
                raise ExportError(f"{p.name}:{ln}: expected two integers, got {row!r}")
    if len(rows) != n_source:
        raise ExportError(f"{p.name}: {len(rows)} label rows for "
                          f"{n_source} source frames")
    labels = np.full(n_source, -1, dtype=np.int64)
    for idx, phase in rows:
        if not 0 <= idx < n_source:
            raise ExportError(f"{p.name}: frame_index {idx} outside [0, {n_source})")
        if labels[idx] != -1:
            raise ExportError(f"{p.name}: duplicate frame_index {idx}")
        if phase < 0:
            raise ExportError(f"{p.name}: negative phase_id {phase} at frame {idx}")
        labels[idx] = phase
    c = int(labels.max()) + 1
    return labels, c


# ---------------------------------------------------------------------------


def export_video(spec: ExportSpec, encoder=None, log=None) -> ExportResult:
    """Run the full pipeline for one video; one writer, one output file.

    An already loaded FrozenEncoder can be passed in so batch exports share
    one network.
    """
    spec.validate()
    src, n_source, src_fps, is_dir = _probe_source(spec)
    source_labels, c = load_label_csv(spec.labels, n_source)

    wanted = subsample_indices(n_source, src_fps, spec.rate)
    if not wanted:
        raise ExportError(f"{src.name}: {n_source} frames at {src_fps} fps make "
                          f"no full frame at {spec.rate} fps")
    labels = source_labels[wanted]

    if encoder is None:
        encoder = load_encoder(spec.encoder, spec.weights, spec.seed)
    frames = _dir_frames(src, wanted) if is_dir else _video_frames(src, wanted)

    chunks = []
    batch: list[np.ndarray] = []
    done = 0
    for frame in frames:
        batch.append(frame)
        if len(batch) == spec.batch:
            chunks.append(encoder.encode(np.stack(batch)))
            done += len(batch)
            batch = []
            if log:
                log(f"{src.name}: encoded {done}/{len(wanted)}")
    if batch:
        chunks.append(encoder.encode(np.stack(batch)))
    feats = np.concatenate(chunks, axis=0)

    if feats.shape[1] != encoder.expected_width:
        raise ExportError(
            f"{spec.encoder}: encoder produced width {feats.shape[1]}, "
            f"expected {encoder.expected_width}; refusing to write a "
            f"mislabeled header")
    if feats.shape[0] != len(wanted):
        raise ExportError(f"{src.name}: encoded {feats.shape[0]} frames, "
                          f"selected {len(wanted)}")

    out = Path(spec.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(sfb_bytes(feats, labels, c))
    return ExportResult(out=str(out), t=feats.shape[0], d_in=feats.shape[1],
                        c=c, n_source=n_source, pretrained=encoder.pretrained)
