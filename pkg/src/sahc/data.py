"""Feature-sequence I/O (.sfb files), split manifests, and a synthetic
phase-sequence generator used for end-to-end checks.

SFB layout, little-endian throughout:
  bytes 0..3    magic b"SAHC"
  bytes 4..7    format version (u32, currently 1)
  bytes 8..19   T, D_in, C (u32 each)
  then          T * D_in float32 features, row-major
  then          T uint16 frame labels
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SFB_MAGIC = b"SAHC"
SFB_VERSION = 1


class DataError(ValueError):
    """Dataset-level problem: missing files, inconsistent headers, bad labels."""


class SFBError(DataError):
    """Malformed .sfb payload; messages carry the byte offset of the problem."""


@dataclass
class FeatureSequence:
    video_id: str
    features: np.ndarray  # [T, D_in] float32
    labels: np.ndarray    # [T] int
    c: int                # number of classes the labels are drawn from

    @property
    def t(self) -> int:
        return self.features.shape[0]

    @property
    def d_in(self) -> int:
        return self.features.shape[1]


def write_sfb(path, seq: FeatureSequence) -> None:
    feats = np.ascontiguousarray(seq.features, dtype=np.float32)
    labels = np.asarray(seq.labels, dtype=np.int64).reshape(-1)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise DataError(f"{seq.video_id}: need a [T, D] feature matrix with T >= 1")
    if labels.shape[0] != feats.shape[0]:
        raise DataError(f"{seq.video_id}: {labels.shape[0]} labels for {feats.shape[0]} frames")
    if seq.c < 1 or seq.c > 0xFFFF:
        raise DataError(f"{seq.video_id}: class count {seq.c} not storable")
    if labels.min() < 0 or labels.max() >= seq.c:
        raise DataError(f"{seq.video_id}: labels outside [0, {seq.c})")
    t, d = feats.shape
    blob = bytearray()
    blob += SFB_MAGIC
    blob += struct.pack("<IIII", SFB_VERSION, t, d, seq.c)
    blob += feats.astype("<f4").tobytes()
    blob += labels.astype("<u2").tobytes()
    Path(path).write_bytes(bytes(blob))


def read_sfb(path) -> FeatureSequence:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 20:
        raise SFBError(f"{path.name}: file truncated inside the header "
                       f"(need 20 bytes, got {len(raw)})")
    if raw[0:4] != SFB_MAGIC:
        raise SFBError(f"{path.name}: bad magic at offset 0: {raw[0:4]!r}")
    version, t, d, c = struct.unpack_from("<IIII", raw, 4)
    if version != SFB_VERSION:
        raise SFBError(f"{path.name}: unsupported version {version} at offset 4")
    if t < 1 or d < 1 or c < 1:
        raise SFBError(f"{path.name}: non-positive header field at offset 8 "
                       f"(T={t}, D_in={d}, C={c})")
    feat_off = 20
    feat_len = 4 * t * d
    lab_off = feat_off + feat_len
    lab_len = 2 * t
    expect = lab_off + lab_len
    if len(raw) < lab_off:
        raise SFBError(f"{path.name}: feature block truncated at offset {len(raw)} "
                       f"(features span {feat_off}..{lab_off})")
    if len(raw) < expect:
        raise SFBError(f"{path.name}: label block truncated at offset {len(raw)} "
                       f"(labels span {lab_off}..{expect})")
    if len(raw) > expect:
        raise SFBError(f"{path.name}: {len(raw) - expect} trailing bytes at offset {expect}")
    feats = np.frombuffer(raw, dtype="<f4", count=t * d, offset=feat_off).reshape(t, d).copy()
    labels = np.frombuffer(raw, dtype="<u2", count=t, offset=lab_off).astype(np.int64)
    if labels.max() >= c:
        bad = int(np.argmax(labels >= c))
        raise SFBError(f"{path.name}: label {int(labels[bad])} at frame {bad} "
                       f"exceeds C={c} (labels start at offset {lab_off})")
    return FeatureSequence(video_id=path.stem, features=feats, labels=labels, c=c)


# ---------------------------------------------------------------------------
# split manifests


@dataclass
class SplitManifest:
    c: int
    d_in: int
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)

    def split(self, name: str) -> list[str]:
        if name not in ("train", "val", "test"):
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)


def write_manifest(path, manifest: SplitManifest) -> None:
    lines = [f"C={manifest.c}", f"D={manifest.d_in}"]
    for split in ("train", "val", "test"):
        lines.append(f"[{split}]")
        lines.extend(manifest.split(split))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> SplitManifest:
    path = Path(path)
    header: dict[str, int] = {}
    splits: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    current = None
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        m = re.fullmatch(r"\[(\w+)\]", line)
        if m:
            if m.group(1) not in splits:
                raise DataError(f"{path.name}:{ln}: unknown split section [{m.group(1)}]")
            current = m.group(1)
            continue
        if "=" in line and current is None:
            key, val = line.split("=", 1)
            try:
                header[key.strip()] = int(val)
            except ValueError:
                raise DataError(f"{path.name}:{ln}: non-integer header value {val!r}")
            continue
        if current is None:
            raise DataError(f"{path.name}:{ln}: video id before any split section")
        splits[current].append(line)
    for key in ("C", "D"):
        if key not in header or header[key] < 1:
            raise DataError(f"{path.name}: missing or non-positive header field {key}")
    seen: dict[str, str] = {}
    for split, ids in splits.items():
        for vid in ids:
            if vid in seen:
                raise DataError(f"{path.name}: video {vid!r} listed in both "
                                f"{seen[vid]} and {split}")
            seen[vid] = split
    return SplitManifest(c=header["C"], d_in=header["D"],
                         train=splits["train"], val=splits["val"], test=splits["test"])


@dataclass
class DatasetSplits:
    manifest: SplitManifest
    train: list[FeatureSequence]
    val: list[FeatureSequence]
    test: list[FeatureSequence]

    def split(self, name: str) -> list[FeatureSequence]:
        if name not in ("train", "val", "test"):
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)


def load_dataset(data_dir, manifest_name: str = "manifest.txt") -> DatasetSplits:
    """Read the manifest plus every referenced .sfb; all problems are collected
    and reported together rather than failing on the first file."""
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir / manifest_name)
    problems: list[str] = []
    loaded: dict[str, list[FeatureSequence]] = {"train": [], "val": [], "test": []}
    for split in ("train", "val", "test"):
        for vid in manifest.split(split):
            fp = data_dir / f"{vid}.sfb"
            if not fp.exists():
                problems.append(f"{split}: missing file {fp.name}")
                continue
            try:
                seq = read_sfb(fp)
            except SFBError as e:
                problems.append(f"{split}: {e}")
                continue
            if seq.c != manifest.c:
                problems.append(f"{split}: {vid} declares C={seq.c}, manifest says {manifest.c}")
            elif seq.d_in != manifest.d_in:
                problems.append(f"{split}: {vid} has D_in={seq.d_in}, manifest says {manifest.d_in}")
            else:
                loaded[split].append(seq)
    if problems:
        raise DataError("dataset inconsistent:\n  " + "\n  ".join(problems))
    return DatasetSplits(manifest=manifest, train=loaded["train"],
                         val=loaded["val"], test=loaded["test"])


# ---------------------------------------------------------------------------
# synthetic phase sequences


@dataclass
class SyntheticSpec:
    """Controls for the synthetic generator.

    Classes progress mostly forward from 0 to c-1; with probability
    backward_prob a transition instead jumps back to a uniformly chosen earlier
    class. Features are fixed random unit prototypes per class, blended across
    boundary_width frames at phase changes, plus N(0, noise_sigma^2) noise.
    """

    c: int = 7
    d_in: int = 32
    mean_duration: float = 60.0
    std_duration: float = 15.0
    boundary_width: int = 10
    noise_sigma: float = 0.6
    backward_prob: float = 0.05
    n_train: int = 40
    n_val: int = 8
    n_test: int = 10

    def validate(self):
        if self.c < 2:
            raise DataError(f"need at least 2 classes, got {self.c}")
        if self.d_in < 1:
            raise DataError("d_in must be positive")
        if self.mean_duration < 1:
            raise DataError("mean_duration must be >= 1 frame")
        if self.boundary_width < 0:
            raise DataError("boundary_width must be >= 0")
        if not 0.0 <= self.backward_prob < 1.0:
            raise DataError("backward_prob must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise DataError("every split needs at least one video")


def _sample_duration(spec: SyntheticSpec, rng: np.random.Generator) -> int:
    for _ in range(100):
        d = int(round(rng.normal(spec.mean_duration, spec.std_duration)))
        if d >= 1:
            return d
    raise DataError("could not draw a positive segment duration in 100 tries; "
                    "mean_duration/std_duration are implausible")


def _phase_segments(spec: SyntheticSpec, rng: np.random.Generator) -> list[tuple[int, int]]:
    """(class, duration) runs; mostly forward, occasional backward jumps, the
    chain terminates once the final class has been visited."""
    segs: list[tuple[int, int]] = []
    c = 0
    while True:
        segs.append((c, _sample_duration(spec, rng)))
        if c == spec.c - 1:
            break
        # bounded backtracking so every video terminates
        if c > 0 and len(segs) < 8 * spec.c and rng.random() < spec.backward_prob:
            c = int(rng.integers(0, c))
        else:
            c += 1
    return segs


def _render_features(segs, protos: np.ndarray, spec: SyntheticSpec,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    labels = np.concatenate([np.full(dur, cls, dtype=np.int64) for cls, dur in segs])
    t_total = labels.size
    feats = protos[labels].astype(np.float64)
    w_b = spec.boundary_width
    if w_b > 0:
        starts = np.cumsum([0] + [dur for _, dur in segs])
        for j, (cls, dur) in enumerate(segs):
            s, e = starts[j], starts[j + 1]
            idx = np.arange(s, e)
            d_left = idx - s
            d_right = (e - 1) - idx
            # blend toward whichever neighboring phase is closer
            a_left = np.where(d_left < w_b, 0.5 * (1.0 - d_left / w_b), 0.0) \
                if j > 0 else np.zeros(dur)
            a_right = np.where(d_right < w_b, 0.5 * (1.0 - d_right / w_b), 0.0) \
                if j < len(segs) - 1 else np.zeros(dur)
            use_left = a_left >= a_right
            alpha = np.where(use_left, a_left, a_right)
            neighbor = np.where(use_left,
                                segs[j - 1][0] if j > 0 else cls,
                                segs[j + 1][0] if j < len(segs) - 1 else cls)
            mixed = (1.0 - alpha)[:, None] * protos[cls] + alpha[:, None] * protos[neighbor]
            feats[s:e] = mixed
    if spec.noise_sigma > 0:
        feats = feats + rng.standard_normal((t_total, spec.d_in)) * spec.noise_sigma
    return feats.astype(np.float32), labels


def generate_synthetic(spec: SyntheticSpec, seed: int) -> tuple[DatasetSplits, SplitManifest]:
    """Deterministic dataset for a given (spec, seed); one shared prototype set."""
    spec.validate()
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((spec.c, spec.d_in))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)

    counts = [("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)]
    manifest = SplitManifest(c=spec.c, d_in=spec.d_in)
    out: dict[str, list[FeatureSequence]] = {"train": [], "val": [], "test": []}
    serial = 0
    for split, n in counts:
        for _ in range(n):
            vid = f"video_{serial:03d}"
            serial += 1
            segs = _phase_segments(spec, rng)
            feats, labels = _render_features(segs, protos, spec, rng)
            out[split].append(FeatureSequence(video_id=vid, features=feats,
                                              labels=labels, c=spec.c))
            manifest.split(split).append(vid)
    splits = DatasetSplits(manifest=manifest, train=out["train"],
                           val=out["val"], test=out["test"])
    return splits, manifest


def write_dataset(data_dir, splits: DatasetSplits, manifest_name: str = "manifest.txt") -> None:
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    for split in ("train", "val", "test"):
        for seq in splits.split(split):
            write_sfb(data_dir / f"{seq.video_id}.sfb", seq)
    write_manifest(data_dir / manifest_name, splits.manifest)
