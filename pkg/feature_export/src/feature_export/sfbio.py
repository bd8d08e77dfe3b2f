"""Standalone .sfb writer, reader, and verifier.

The byte layout is the shared contract with the downstream sequence-model
package, implemented here from the format description alone (no import of the
consumer), so verify() acts as an independent check on exported files:

  bytes 0..3    magic b"SAHC"
  bytes 4..7    format version (u32 little-endian, currently 1)
  bytes 8..19   T, D_in, C (u32 each)
  then          T * D_in float32 features, row-major
  then          T uint16 frame labels
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SAHC"
VERSION = 1
HEADER_LEN = 20


class SFBReadError(ValueError):
    """Malformed .sfb bytes; the message carries the offending byte offset."""


def sfb_bytes(features: np.ndarray, labels: np.ndarray, c: int) -> bytes:
    feats = np.ascontiguousarray(features, dtype="<f4")
    labs = np.asarray(labels).reshape(-1)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValueError("need a [T, D] feature matrix with T >= 1")
    if labs.shape[0] != feats.shape[0]:
        raise ValueError(f"{labs.shape[0]} labels for {feats.shape[0]} feature rows")
    if not 1 <= c <= 0xFFFF:
        raise ValueError(f"class count {c} not storable in the header")
    if labs.min() < 0 or labs.max() >= c:
        raise ValueError(f"labels outside [0, {c})")
    t, d = feats.shape
    return (MAGIC + struct.pack("<IIII", VERSION, t, d, c)
            + feats.tobytes() + labs.astype("<u2").tobytes())


def write_sfb_file(path, features, labels, c: int) -> None:
    Path(path).write_bytes(sfb_bytes(features, labels, c))


def _parse(raw: bytes, name: str):
    if len(raw) < HEADER_LEN:
        raise SFBReadError(f"{name}: header truncated at offset {len(raw)} "
                           f"(need {HEADER_LEN} bytes)")
    if raw[:4] != MAGIC:
        raise SFBReadError(f"{name}: bad magic at offset 0: {raw[:4]!r}")
    version, t, d, c = struct.unpack_from("<IIII", raw, 4)
    if version != VERSION:
        raise SFBReadError(f"{name}: unsupported version {version} at offset 4")
    if t < 1 or d < 1 or c < 1:
        raise SFBReadError(f"{name}: non-positive dimension at offset 8 "
                           f"(T={t}, D_in={d}, C={c})")
    feat_end = HEADER_LEN + 4 * t * d
    total = feat_end + 2 * t
    if len(raw) < feat_end:
        raise SFBReadError(f"{name}: feature block truncated at offset {len(raw)} "
                           f"(features end at {feat_end})")
    if len(raw) < total:
        raise SFBReadError(f"{name}: label block truncated at offset {len(raw)} "
                           f"(labels end at {total})")
    if len(raw) > total:
        raise SFBReadError(f"{name}: {len(raw) - total} trailing bytes at offset {total}")
    feats = np.frombuffer(raw, dtype="<f4", count=t * d,
                          offset=HEADER_LEN).reshape(t, d)
    labs = np.frombuffer(raw, dtype="<u2", count=t, offset=feat_end)
    if labs.max() >= c:
        bad = int(np.argmax(labs >= c))
        raise SFBReadError(f"{name}: label {int(labs[bad])} at frame {bad} "
                           f">= C={c} (labels start at offset {feat_end})")
    return feats, labs.astype(np.int64), c


def read_sfb_file(path):
    """Parse an .sfb file; returns (features [T, D] f32, labels [T] i64, c)."""
    path = Path(path)
    return _parse(path.read_bytes(), path.name)


@dataclass
class VerifyReport:
    path: str
    ok: bool
    t: int = 0
    d_in: int = 0
    c: int = 0
    problems: list = field(default_factory=list)

    def summary(self) -> str:
        head = f"{self.path}: T={self.t} D_in={self.d_in} C={self.c}"
        if self.ok:
            return f"{head}  PASS"
        lines = "\n".join(f"  {p}" for p in self.problems)
        return f"{self.path}: FAIL\n{lines}"


def verify_sfb(path) -> VerifyReport:
    """Structural re-parse plus finiteness and label-range checks."""
    path = Path(path)
    try:
        feats, labs, c = _parse(path.read_bytes(), path.name)
    except (OSError, SFBReadError) as e:
        return VerifyReport(path=str(path), ok=False, problems=[str(e)])
    problems = []
    bad = ~np.isfinite(feats)
    if bad.any():
        row = int(np.argmax(bad.any(axis=1)))
        off = HEADER_LEN + 4 * row * feats.shape[1]
        problems.append(f"non-finite feature value in row {row} "
                        f"(row starts at offset {off})")
    return VerifyReport(path=str(path), ok=not problems, t=feats.shape[0],
                        d_in=feats.shape[1], c=c, problems=problems)
