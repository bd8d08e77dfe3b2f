"""Optimization loop: Adam with bias correction, stepwise LR decay, per-epoch
checkpoints, CSV logging, and best-checkpoint selection by validation accuracy.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import FeatureSequence
from .losses import LabelHierarchy, LossConfig, downsample_labels, total_loss
from .model import ModelConfig, ModelParams, forward, init_model
from .tensor import AutodiffError, Tape, Tensor, backward

CKPT_MAGIC = b"SAHCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint payload."""


class TrainingDiverged(RuntimeError):
    """Loss or a gradient went non-finite; carries where it happened."""

    def __init__(self, epoch: int, video_id: str, detail: str):
        super().__init__(f"training diverged at epoch {epoch} on video {video_id}: {detail}")
        self.epoch = epoch
        self.video_id = video_id


@dataclass
class TrainConfig:
    base_lr: float = 5e-4
    decay_factor: float = 0.1
    decay_every: int = 30   # epochs per LR step-down
    epochs: int = 100
    seed: int = 0
    grad_clip: float = 0.0  # 0 disables global-norm clipping
    checkpoint_every: int = 1


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 0-based epoch index: base * factor^(epoch // every)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.base_lr * cfg.decay_factor ** (epoch // cfg.decay_every)


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optim(named: dict[str, Tensor]) -> OptimState:
    return OptimState(m={n: np.zeros_like(p.data) for n, p in named.items()},
                      v={n: np.zeros_like(p.data) for n, p in named.items()})


def adam_step(named: dict[str, Tensor], grads: dict[int, np.ndarray],
              state: OptimState, lr: float) -> None:
    """One in-place Adam update; rejects non-finite gradients by parameter name."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in named.items():
        g = grads.get(p.uid)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_global_norm(grads: dict[int, np.ndarray], max_norm: float) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    epoch: int
    val_accuracy: float


def save_checkpoint(path, params: ModelParams, config: ModelConfig,
                    epoch: int, val_accuracy: float) -> None:
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<I", CKPT_VERSION)
    kv = dict(config.to_kv())
    kv["epoch"] = str(epoch)
    kv["val_accuracy"] = repr(float(val_accuracy))
    cfg_text = "\n".join(f"{k}={v}" for k, v in kv.items()).encode("utf-8")
    blob += struct.pack("<I", len(cfg_text))
    blob += cfg_text
    named = params.named()
    blob += struct.pack("<I", len(named))
    for name, p in named.items():
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb))
        blob += nb
        blob += struct.pack("<I", p.data.ndim)
        blob += struct.pack(f"<{p.data.ndim}I", *p.data.shape)
        blob += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"{path.name}: truncated while reading {what} "
                                  f"at offset {off}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(7, "magic") != CKPT_MAGIC:
        raise CheckpointError(f"{path.name}: bad magic, not a checkpoint")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path.name}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    kv: dict[str, str] = {}
    for line in take(cfg_len, "config block").decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            kv[k] = v
    epoch = int(kv.pop("epoch", "0"))
    val_acc = float(kv.pop("val_accuracy", "nan"))
    config = ModelConfig.from_kv(kv)
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<I", take(4, f"tensor {i} name length"))
        name = take(nlen, f"tensor {i} name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"tensor {name!r} rank"))
        if rank > 8:
            raise CheckpointError(f"{path.name}: tensor {name!r} has implausible "
                                  f"rank {rank} at offset {off - 4}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"tensor {name!r} dims"))
        n_elem = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = take(4 * n_elem, f"tensor {name!r} data")
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(dims).copy()
    if off != len(raw):
        raise CheckpointError(f"{path.name}: {len(raw) - off} trailing bytes at offset {off}")
    return Checkpoint(config=config, tensors=tensors, epoch=epoch, val_accuracy=val_acc)


def params_from_checkpoint(ckpt: Checkpoint,
                           expect: Optional[ModelConfig] = None) -> tuple[ModelParams, ModelConfig]:
    """Rebuild trainable parameters, verifying the stored set against the
    architecture the config implies."""
    config = ckpt.config
    if expect is not None:
        diffs = [f"{k}: checkpoint={v}, expected={ev}"
                 for (k, v), (_, ev) in zip(sorted(config.to_kv().items()),
                                            sorted(expect.to_kv().items()))
                 if v != ev]
        if diffs:
            raise CheckpointError("checkpoint config mismatch: " + "; ".join(diffs))
    skeleton = init_model(config, seed=0)
    named = skeleton.named()
    missing = sorted(set(named) - set(ckpt.tensors))
    extra = sorted(set(ckpt.tensors) - set(named))
    if missing or extra:
        raise CheckpointError(f"checkpoint tensor set mismatch: missing={missing}, "
                              f"unexpected={extra}")
    for name, p in named.items():
        got = ckpt.tensors[name]
        if got.shape != p.data.shape:
            raise CheckpointError(f"tensor {name!r} has shape {got.shape}, "
                                  f"expected {p.data.shape}")
        p.data = got.astype(p.data.dtype)
    return skeleton, config


# ---------------------------------------------------------------------------
# the loop


@dataclass
class EpochRow:
    epoch: int
    lr: float
    frame_ce: float
    segment_ce: float
    smooth: float
    total: float
    val_accuracy: float


@dataclass
class TrainResult:
    history: list[EpochRow]
    best_epoch: int
    best_val_accuracy: float
    params: ModelParams
    config: ModelConfig
    checkpoint_paths: list[Path] = field(default_factory=list)
    best_path: Optional[Path] = None


CSV_HEADER = "epoch,lr,L_frame,L_segment,L_smooth,total,val_accuracy"


def select_best(history: list[EpochRow]) -> int:
    """Epoch with the highest validation accuracy; ties go to the earliest."""
    if not history:
        raise ValueError("empty history")
    best = history[0]
    for row in history[1:]:
        if row.val_accuracy > best.val_accuracy:
            best = row
    return best.epoch


def _val_accuracy(params: ModelParams, config: ModelConfig,
                  videos: list[FeatureSequence]) -> float:
    if not videos:
        return float("nan")
    accs = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for seq in videos:
            out = forward(seq.features, params, config, mode="eval")
            pred = np.argmax(out.frame_logits.data, axis=1)
            accs.append(float(np.mean(pred == seq.labels)))
    return float(np.mean(accs))


def train(model_cfg: ModelConfig, loss_cfg: LossConfig, train_cfg: TrainConfig,
          train_videos: list[FeatureSequence], val_videos: list[FeatureSequence],
          out_dir=None, resume: Optional[Checkpoint] = None,
          log=None) -> TrainResult:
    """Run the full schedule. Videos are visited one at a time in a fresh
    seeded shuffle each epoch; one optimizer step per video.

    Writes, when out_dir is given: epoch_NNN.ckpt per checkpoint_every,
    epochs.csv, and a "best" marker naming the top checkpoint. Resuming
    restores parameters and continues from the stored epoch with a fresh
    optimizer.
    """
    if not train_videos:
        raise ValueError("no training videos")
    for seq in train_videos + val_videos:
        if seq.d_in != model_cfg.d_in:
            raise ValueError(f"{seq.video_id}: D_in={seq.d_in} does not match "
                             f"model D_in={model_cfg.d_in}")
        if seq.labels.max() >= model_cfg.c:
            raise ValueError(f"{seq.video_id}: label outside [0, {model_cfg.c})")

    start_epoch = 0
    if resume is not None:
        params, _ = params_from_checkpoint(resume, expect=model_cfg)
        start_epoch = resume.epoch + 1
    else:
        params = init_model(model_cfg, seed=train_cfg.seed)
    named = params.named()
    tensors = list(named.values())
    opt = init_optim(named)

    order_rng = np.random.default_rng([train_cfg.seed, 0x0DDE])
    drop_rng = np.random.default_rng([train_cfg.seed, 0xD209])
    for _ in range(start_epoch):  # keep the visit order aligned after a resume
        order_rng.permutation(len(train_videos))
    hierarchies: dict[str, LabelHierarchy] = {
        seq.video_id: downsample_labels(seq.labels, model_cfg.k, model_cfg.m)
        for seq in train_videos}

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "epochs.csv"
        if start_epoch == 0 or not csv_path.exists():
            csv_path.write_text(CSV_HEADER + "\n")

    history: list[EpochRow] = []
    ckpt_paths: list[Path] = []
    best_row: Optional[EpochRow] = None
    best_path: Optional[Path] = None

    for epoch in range(start_epoch, train_cfg.epochs):
        lr = lr_at(epoch, train_cfg)
        order = order_rng.permutation(len(train_videos))
        sums = {"frame_ce": 0.0, "segment_ce": 0.0, "smooth": 0.0, "total": 0.0}
        for vi in order:
            seq = train_videos[vi]
            hier = hierarchies[seq.video_id]
            with Tape() as tape:
                out = forward(seq.features, params, model_cfg, mode="train", rng=drop_rng)
                loss, breakdown = total_loss(out, hier, loss_cfg)
            if not np.isfinite(breakdown["total"]):
                raise TrainingDiverged(epoch, seq.video_id,
                                       f"loss became {breakdown['total']}")
            try:
                grads = backward(loss, tape, params=tensors)
            except AutodiffError as e:
                raise TrainingDiverged(epoch, seq.video_id, str(e))
            if train_cfg.grad_clip > 0:
                clip_global_norm(grads, train_cfg.grad_clip)
            try:
                adam_step(named, grads, opt, lr)
            except FloatingPointError as e:
                raise TrainingDiverged(epoch, seq.video_id, str(e))
            for key in sums:
                sums[key] += breakdown[key]
        n = len(train_videos)
        val_acc = _val_accuracy(params, model_cfg, val_videos)
        row = EpochRow(epoch=epoch, lr=lr,
                       frame_ce=sums["frame_ce"] / n, segment_ce=sums["segment_ce"] / n,
                       smooth=sums["smooth"] / n, total=sums["total"] / n,
                       val_accuracy=val_acc)
        history.append(row)
        if log is not None:
            log(f"epoch {epoch:3d}  lr {lr:.2e}  loss {row.total:.4f}  "
                f"val_acc {val_acc:.4f}")

        if out_dir is not None:
            with open(out_dir / "epochs.csv", "a") as fh:
                fh.write(f"{epoch},{lr!r},{row.frame_ce!r},{row.segment_ce!r},"
                         f"{row.smooth!r},{row.total!r},{val_acc!r}\n")
            if (epoch + 1) % max(1, train_cfg.checkpoint_every) == 0 \
                    or epoch == train_cfg.epochs - 1:
                cp = out_dir / f"epoch_{epoch:03d}.ckpt"
                save_checkpoint(cp, params, model_cfg, epoch, val_acc)
                ckpt_paths.append(cp)
                if best_row is None or val_acc > best_row.val_accuracy:
                    best_path = cp
        if best_row is None or val_acc > best_row.val_accuracy:
            best_row = row

    if out_dir is not None and best_path is not None:
        (out_dir / "best").write_text(best_path.name + "\n")

    return TrainResult(history=history,
                       best_epoch=select_best(history),
                       best_val_accuracy=best_row.val_accuracy if best_row else float("nan"),
                       params=params, config=model_cfg,
                       checkpoint_paths=ckpt_paths, best_path=best_path)
