"""Tape-based reverse-mode autodiff over dense numpy arrays.

The primitive set is exactly what the phase-recognition network needs:
elementwise add/mul, matmul, strided/dilated 1-D convolution, relu,
(masked) softmax, log, sum/mean, feature concat, temporal max/avg pooling,
layer norm, dropout and temporal slicing. Training runs at float32;
gradient checks run at float64 where central differences are trustworthy.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeRecord",
    "AutodiffError",
    "backward",
    "grad_check",
    "grad_check_sampled",
    "add",
    "add_rows",
    "mul",
    "scale",
    "matmul",
    "conv1d",
    "transpose",
    "relu",
    "softmax",
    "masked_softmax",
    "log",
    "sum_all",
    "mean_all",
    "concat_features",
    "slice_time",
    "max_pool1d",
    "avg_pool1d",
    "layer_norm",
    "dropout",
]

_uid_counter = itertools.count()


class AutodiffError(RuntimeError):
    """Raised on contract violations or non-finite values in the backward sweep."""


class Tensor:
    """Dense n-d array with an optional gradient slot.

    ``data`` is always a numpy float array (float32 or float64); ``grad``
    is filled in by :func:`backward` for tensors with ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "uid", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.uid = next(_uid_counter)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={tuple(self.shape)}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class TapeRecord:
    """One primitive application: op id, operands, output and its local backward."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications; inputs always precede outputs."""

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack.pop()
        assert popped is self
        return False


_tape_stack: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        tape.records.append(TapeRecord(op, inputs, out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape, params: Optional[Iterable[Tensor]] = None) -> dict[int, np.ndarray]:
    """Reverse sweep over ``tape``; returns gradients keyed by tensor uid.

    Every ``requires_grad`` tensor reachable from ``loss`` gets its ``.grad``
    set; tensors listed in ``params`` but unreachable get zeros. Raises
    :class:`AutodiffError` on a non-scalar loss or a NaN gradient, naming
    the offending primitive.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"backward() expects a scalar loss, got shape {tuple(loss.shape)}")
    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g_out = grads.get(rec.output.uid)
        if g_out is None:
            continue
        g_inputs = rec.backward_fn(g_out)
        for t, g in zip(rec.inputs, g_inputs):
            if g is None:
                continue
            if np.isnan(g).any():
                raise AutodiffError(f"NaN gradient produced by primitive '{rec.op}'")
            acc = grads.get(t.uid)
            grads[t.uid] = g if acc is None else acc + g
        if not rec.output.requires_grad:
            # intermediate grads are only needed while sweeping; free eagerly
            del grads[rec.output.uid]
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad and t.uid in grads:
                t.grad = grads[t.uid]
    if params is not None:
        for p in params:
            if p.uid not in grads:
                grads[p.uid] = np.zeros_like(p.data)
                if p.requires_grad:
                    p.grad = grads[p.uid]
    return grads


# ---------------------------------------------------------------------------
# primitives


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise AutodiffError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def add_rows(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-D vector to every row of a [T, D] matrix (bias add)."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise AutodiffError(f"add_rows: incompatible shapes {x.shape} and {b.shape}")
    return _emit("add_rows", (x, b), x.data + b.data[None, :],
                 lambda g: (g, g.sum(axis=0)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (x,), x.data * x.dtype.type(c), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd,
                 lambda g: (g @ bd.T, ad.T @ g))


def _conv_taps(T: int, k_w: int, stride: int, dilation: int, left_pad: int):
    """Input row indices per tap: idx[a][p] feeds output p through kernel slice a."""
    span = (k_w - 1) * dilation + 1
    out_len = (T + left_pad - span) // stride + 1
    if out_len < 1:
        raise AutodiffError(
            f"conv1d: input of length {T} too short for kernel span {span} (left_pad={left_pad})")
    base = np.arange(out_len) * stride - left_pad
    return out_len, [base + a * dilation for a in range(k_w)]


def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, dilation: int = 1, left_pad: int = 0) -> Tensor:
    """Strided/dilated 1-D convolution over time.

    ``x`` is [T, D_in], ``w`` is [k_w, D_in, D_out]. Rows outside [0, T) read
    as zeros (only reachable through ``left_pad``); with
    ``left_pad=(k_w-1)*dilation`` and stride 1 the output is causal and
    length-preserving, with ``left_pad=0, stride=k_w=k`` it is the
    non-overlapping window fusion.
    """
    if dilation < 1:
        raise AutodiffError(f"conv1d: dilation must be >= 1, got {dilation}")
    if stride < 1:
        raise AutodiffError(f"conv1d: stride must be >= 1, got {stride}")
    if x.data.ndim != 2 or w.data.ndim != 3 or x.shape[1] != w.shape[1]:
        raise AutodiffError(f"conv1d: incompatible shapes x={x.shape} w={w.shape}")
    T, d_in = x.shape
    k_w, _, d_out = w.shape
    out_len, taps = _conv_taps(T, k_w, stride, dilation, left_pad)
    xd, wd = x.data, w.data

    gathered = []  # per-tap [out_len, D_in] views with zero padding
    out = np.zeros((out_len, d_out), dtype=xd.dtype)
    for a, idx in enumerate(taps):
        valid = (idx >= 0) & (idx < T)
        if valid.all():
            xa = xd[idx]
        else:
            xa = np.zeros((out_len, d_in), dtype=xd.dtype)
            xa[valid] = xd[idx[valid]]
        gathered.append((xa, idx, valid))
        out += xa @ wd[a]
    if b is not None:
        if b.data.shape != (d_out,):
            raise AutodiffError(f"conv1d: bias shape {b.shape} != ({d_out},)")
        out = out + b.data[None, :]

    def _bwd(g: np.ndarray):
        gx = np.zeros_like(xd)
        gw = np.empty_like(wd)
        for a, (xa, idx, valid) in enumerate(gathered):
            gw[a] = xa.T @ g
            contrib = g @ wd[a].T
            if valid.all():
                if stride == 1:
                    gx[idx[0]:idx[0] + out_len] += contrib
                else:
                    np.add.at(gx, idx, contrib)
            else:
                np.add.at(gx, idx[valid], contrib[valid])
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv1d", inputs, out, _bwd)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise AutodiffError(f"transpose: expected 2-d tensor, got shape {x.shape}")
    return _emit("transpose", (x,), x.data.T.copy(), lambda g: (g.T,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, x.dtype.type(0)),
                 lambda g: (g * mask,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def _bwd(g: np.ndarray):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _emit("softmax", (x,), y, _bwd)


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row softmax over the last axis with False entries excluded.

    Excluded entries get exact weight 0.0; rows with no admitted entry come
    out all-zero (the declared fallback for queries that can see no keys).
    """
    if mask.shape != x.data.shape:
        raise AutodiffError(f"masked_softmax: mask shape {mask.shape} != {x.data.shape}")
    xd = np.where(mask, x.data, -np.inf)
    m = xd.max(axis=-1, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, x.dtype.type(0))
    e = np.exp(xd - m_safe)  # exp(-inf) == 0.0 exactly at masked entries
    denom = e.sum(axis=-1, keepdims=True)
    y = e / np.where(denom > 0, denom, x.dtype.type(1))

    def _bwd(g: np.ndarray):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _emit("masked_softmax", (x,), y, _bwd)


def log(x: Tensor, floor: Optional[float] = None) -> Tensor:
    """Natural log, optionally clamped below at ``floor`` (zero grad there)."""
    xd = x.data
    if floor is not None:
        clipped = np.maximum(xd, x.dtype.type(floor))
        live = xd > floor
        out = np.log(clipped)
        return _emit("log", (x,), out, lambda g: (np.where(live, g / xd, x.dtype.type(0)),))
    return _emit("log", (x,), np.log(xd), lambda g: (g / xd,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.data.shape
    return _emit("sum", (x,), x.data.sum(),
                 lambda g: (np.broadcast_to(g, shape).astype(x.dtype, copy=True),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.data.shape
    return _emit("mean", (x,), x.data.mean(),
                 lambda g: ((np.broadcast_to(g, shape) / n).astype(x.dtype, copy=True),))


def concat_features(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate [T, D_i] blocks along the feature axis."""
    if not parts:
        raise AutodiffError("concat_features: empty input list")
    T = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != T:
            raise AutodiffError("concat_features: all parts must be [T, D_i] with equal T")
    widths = [p.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + widths)

    def _bwd(g: np.ndarray):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _emit("concat", tuple(parts), out, _bwd)


def slice_time(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) of a [T, ...] tensor; grad scatters back into place."""
    T = x.shape[0]
    if not (0 <= start <= stop <= T):
        raise AutodiffError(f"slice_time: bad range [{start}, {stop}) for length {T}")
    out = x.data[start:stop].copy()

    def _bwd(g: np.ndarray):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _emit("slice_time", (x,), out, _bwd)


def _pool_windows(x: Tensor, k: int):
    if k < 1:
        raise AutodiffError(f"pool: kernel must be >= 1, got {k}")
    T, d = x.shape
    n = T // k
    if n < 1:
        raise AutodiffError(f"pool: sequence of length {T} shorter than window {k}")
    return n, x.data[: n * k].reshape(n, k, d)


def max_pool1d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping temporal max pooling, stride = kernel = k.

    Ties route the whole gradient to the earliest maximal index. Trailing
    T mod k rows are dropped.
    """
    n, win = _pool_windows(x, k)
    arg = win.argmax(axis=1)  # argmax picks the first maximum
    out = np.take_along_axis(win, arg[:, None, :], axis=1)[:, 0, :]

    def _bwd(g: np.ndarray):
        gx = np.zeros_like(x.data)
        gw = gx[: n * k].reshape(n, k, x.shape[1])
        np.put_along_axis(gw, arg[:, None, :], g[:, None, :], axis=1)
        return (gx,)

    return _emit("max_pool1d", (x,), out, _bwd)


def avg_pool1d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping temporal average pooling, stride = kernel = k."""
    n, win = _pool_windows(x, k)
    out = win.mean(axis=1)

    def _bwd(g: np.ndarray):
        gx = np.zeros_like(x.data)
        gx[: n * k] = np.repeat(g / k, k, axis=0)
        return (gx,)

    return _emit("avg_pool1d", (x,), out, _bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the feature axis, then scale and shift."""
    if x.data.ndim != 2 or gain.data.shape != (x.shape[1],) or bias.data.shape != (x.shape[1],):
        raise AutodiffError(
            f"layer_norm: shapes x={x.shape} gain={gain.shape} bias={bias.shape}")
    xd = x.data
    d = xd.shape[1]
    mu = xd.mean(axis=1, keepdims=True)
    var = xd.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = (xd - mu) * inv
    out = xhat * gain.data[None, :] + bias.data[None, :]

    def _bwd(g: np.ndarray):
        dxhat = g * gain.data[None, :]
        gx = inv * (dxhat
                    - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return (gx, (g * xhat).sum(axis=0), g.sum(axis=0))

    return _emit("layer_norm", (x, gain, bias), out, _bwd)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator],
            training: bool) -> Tensor:
    """Inverted dropout; evaluation mode (or rate 0) is the identity."""
    if not 0.0 <= rate < 1.0:
        raise AutodiffError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return _emit("dropout", (x,), x.data.copy(), lambda g: (g,))
    if rng is None:
        raise AutodiffError("dropout: training mode requires a seeded generator")
    keep = (rng.random(x.data.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _emit("dropout", (x,), x.data * keep, lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor. Meaningful at float64; float32
    central differences drown in rounding noise.
    """
    with Tape() as tape:
        out = f(x)
    grads = backward(out, tape, params=[x])
    analytic = grads[x.uid]
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check_sampled(f: Callable[[], Tensor], params: Sequence[Tensor],
                       n_samples: int, rng: np.random.Generator,
                       eps: float = 1e-5) -> float:
    """grad_check against a random sample of coordinates across ``params``.

    Used for whole-model checks where differencing every weight would take
    hours; ``f`` is a closure re-running the forward pass on the current
    parameter values.
    """
    with Tape() as tape:
        out = f()
    grads = backward(out, tape, params=params)
    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for pick in picks:
        pi = int(np.searchsorted(bounds, pick, side="right"))
        offset = int(pick - (bounds[pi - 1] if pi else 0))
        flat = params[pi].data.reshape(-1)
        orig = flat[offset]
        flat[offset] = orig + eps
        fp = f().item()
        flat[offset] = orig - eps
        fm = f().item()
        flat[offset] = orig
        numeric = (fp - fm) / (2.0 * eps)
        analytic = grads[params[pi].uid].reshape(-1)[offset]
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
