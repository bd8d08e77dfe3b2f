"""Network assembly: frame encoder, segment hierarchy, hierarchical
segment-frame attention, prediction heads, and the streaming contract.

The frame head reads the attended concat (width (M+1)*D, 256 at defaults);
segment predictions at every scale share one D-wide head. With
``causal_attention`` a frame may only attend to segments whose last covered
frame lies in its past, which is what makes streaming inference possible.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields as dc_fields
from typing import Optional

import numpy as np

from . import tensor as tz
from .layers import (
    AttentionParams,
    Conv1DParams,
    CONV_KERNEL_WIDTH,
    RCDLParams,
    TransLayerParams,
    add_positional,
    rcdl_block,
    temporal_fusion,
    transformer_layer,
)
from .tensor import Tensor


class ConfigError(ValueError):
    """Invalid model configuration."""


class ModelError(ValueError):
    """Contract violation in a model call."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults follow the reference setup."""

    d_in: int = 2048
    c: int = 7               # number of phase classes
    d: int = 64              # model feature dim
    m: int = 3               # hierarchy depth (0 = frame-only baseline)
    k: int = 7               # fusion kernel = stride
    l_frame: int = 11        # residual blocks in the frame encoder
    l_seg: int = 10          # residual blocks per segment level
    n_head: int = 4
    fusion_mode: str = "avg"
    dropout_rate: float = 0.5
    t_max: int = 6000        # positional capacity; >= longest sequence
    causal_attention: bool = True
    use_attention: bool = True
    d_ff: int = 0            # 0 -> 4*d

    def __post_init__(self):
        if self.d_ff == 0:
            self.d_ff = 4 * self.d
        self.validate()

    def validate(self):
        if self.d <= 0 or self.d_in <= 0 or self.t_max <= 0:
            raise ConfigError("dimensions must be positive")
        if self.c < 2:
            raise ConfigError(f"need at least 2 phase classes, got C={self.c}")
        if self.d % self.n_head != 0:
            raise ConfigError(f"D={self.d} not divisible by N_head={self.n_head}")
        if self.m < 0:
            raise ConfigError(f"hierarchy depth must be >= 0, got {self.m}")
        if self.m > 0 and self.k < 2:
            raise ConfigError(f"fusion kernel must be >= 2, got {self.k}")
        if self.fusion_mode not in ("max", "avg", "conv"):
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout rate {self.dropout_rate} outside [0, 1)")
        if self.d_ff < self.d:
            raise ConfigError(f"D_ff={self.d_ff} must be >= D={self.d}")

    @property
    def fused_width(self) -> int:
        return (self.m + 1) * self.d if self.use_attention else self.d

    def to_kv(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in dc_fields(self)}

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in dc_fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            if f.type in ("int", int):
                kwargs[f.name] = int(raw)
            elif f.type in ("float", float):
                kwargs[f.name] = float(raw)
            elif f.type in ("bool", bool):
                kwargs[f.name] = raw in ("True", "true", "1")
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


@dataclass
class LevelParams:
    fusion: Optional[Conv1DParams]  # conv fusion only
    blocks: list[RCDLParams]


@dataclass
class ModelParams:
    input_proj: Tensor
    frame_blocks: list[RCDLParams]
    levels: list[LevelParams]
    pos_table: Optional[Tensor]
    trans: Optional[TransLayerParams]
    head_fused_w: Tensor
    head_fused_b: Tensor
    head_seg_w: Tensor
    head_seg_b: Tensor

    def named(self) -> dict[str, Tensor]:
        """Canonical name -> tensor map; iteration order is the init/draw order."""
        out: dict[str, Tensor] = {"input_proj": self.input_proj}

        def _block(prefix: str, blk: RCDLParams):
            out[f"{prefix}.dilated.w"] = blk.dilated.w
            out[f"{prefix}.dilated.b"] = blk.dilated.b
            out[f"{prefix}.pointwise.w"] = blk.pointwise.w
            out[f"{prefix}.pointwise.b"] = blk.pointwise.b

        for i, blk in enumerate(self.frame_blocks):
            _block(f"frame.{i}", blk)
        for j, lv in enumerate(self.levels, start=1):
            if lv.fusion is not None:
                out[f"level{j}.fusion.w"] = lv.fusion.w
                out[f"level{j}.fusion.b"] = lv.fusion.b
            for i, blk in enumerate(lv.blocks):
                _block(f"level{j}.block{i}", blk)
        if self.pos_table is not None:
            out["pos_table"] = self.pos_table
        if self.trans is not None:
            t = self.trans
            for h in range(t.attn.n_heads):
                out[f"attn.head{h}.wq"] = t.attn.wq[h]
                out[f"attn.head{h}.wk"] = t.attn.wk[h]
                out[f"attn.head{h}.wv"] = t.attn.wv[h]
            out["attn.wo"] = t.attn.wo
            out["trans.ffn_w1"] = t.ffn_w1
            out["trans.ffn_b1"] = t.ffn_b1
            out["trans.ffn_w2"] = t.ffn_w2
            out["trans.ffn_b2"] = t.ffn_b2
            out["trans.ln1_gain"] = t.ln1_gain
            out["trans.ln1_bias"] = t.ln1_bias
            out["trans.ln2_gain"] = t.ln2_gain
            out["trans.ln2_bias"] = t.ln2_bias
        out["head_fused.w"] = self.head_fused_w
        out["head_fused.b"] = self.head_fused_b
        out["head_seg.w"] = self.head_seg_w
        out["head_seg.b"] = self.head_seg_b
        return out

    @property
    def dtype(self):
        return self.input_proj.dtype


@dataclass
class ForwardOutput:
    frame_logits: Tensor            # [T, C]
    segment_logits: list[Tensor]    # [T^i, C] per built level
    fused: Tensor                   # [T, fused_width]


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Fan-in-scaled uniform weights, zero biases, N(0, 0.02^2) positional table.

    Tensors are drawn in canonical parameter order, so a fixed seed gives a
    bitwise-identical model.
    """
    config.validate()
    rng = np.random.default_rng(seed)

    def uniform(*shape, fan_in: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                      requires_grad=True)

    def zeros(*shape) -> Tensor:
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape) -> Tensor:
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    def conv(k_w: int, d_in: int, d_out: int) -> Conv1DParams:
        return Conv1DParams(w=uniform(k_w, d_in, d_out, fan_in=k_w * d_in),
                            b=zeros(d_out))

    def rcdl_stack(n: int, d: int) -> list[RCDLParams]:
        return [RCDLParams(dilated=conv(CONV_KERNEL_WIDTH, d, d),
                           pointwise=conv(1, d, d)) for _ in range(n)]

    d = config.d
    input_proj = uniform(config.d_in, d, fan_in=config.d_in)
    frame_blocks = rcdl_stack(config.l_frame, d)
    levels = []
    for _ in range(config.m):
        fusion = conv(config.k, d, d) if config.fusion_mode == "conv" else None
        levels.append(LevelParams(fusion=fusion, blocks=rcdl_stack(config.l_seg, d)))

    pos_table = trans = None
    if config.use_attention and config.m > 0:
        pos_table = Tensor((rng.normal(0.0, 0.02, size=(config.t_max, d))).astype(dtype),
                           requires_grad=True)
        d_h = d // config.n_head
        attn = AttentionParams(
            wq=[uniform(d, d_h, fan_in=d) for _ in range(config.n_head)],
            wk=[uniform(d, d_h, fan_in=d) for _ in range(config.n_head)],
            wv=[uniform(d, d_h, fan_in=d) for _ in range(config.n_head)],
            wo=uniform(d, d, fan_in=d))
        trans = TransLayerParams(
            attn=attn,
            ffn_w1=uniform(d, config.d_ff, fan_in=d), ffn_b1=zeros(config.d_ff),
            ffn_w2=uniform(config.d_ff, d, fan_in=config.d_ff), ffn_b2=zeros(d),
            ln1_gain=ones(d), ln1_bias=zeros(d),
            ln2_gain=ones(d), ln2_bias=zeros(d))

    return ModelParams(
        input_proj=input_proj,
        frame_blocks=frame_blocks,
        levels=levels,
        pos_table=pos_table,
        trans=trans,
        head_fused_w=uniform(config.fused_width, config.c, fan_in=config.fused_width),
        head_fused_b=zeros(config.c),
        head_seg_w=uniform(d, config.c, fan_in=d),
        head_seg_b=zeros(config.c),
    )


def _as_tensor(h, params: ModelParams) -> Tensor:
    if isinstance(h, Tensor):
        return h
    return Tensor(np.asarray(h, dtype=params.dtype))


def encode_frames(h, params: ModelParams, config: ModelConfig, mode: str = "eval",
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """1x1 projection to D then the causal dilated residual stack (dilation 2^l)."""
    x = _as_tensor(h, params)
    if x.data.ndim != 2 or x.shape[1] != config.d_in:
        raise ModelError(
            f"encode_frames: input shape {tuple(x.shape)} does not match D_in={config.d_in}")
    if x.shape[0] < 1:
        raise ModelError("encode_frames: empty sequence")
    x = tz.matmul(x, params.input_proj)
    for l, blk in enumerate(params.frame_blocks):
        x = rcdl_block(x, blk, 2 ** l, config.dropout_rate, mode, rng)
    return x


def build_hierarchy(f0: Tensor, params: ModelParams, config: ModelConfig,
                    mode: str = "eval",
                    rng: Optional[np.random.Generator] = None) -> list[Tensor]:
    """Fusion + residual stack per level; stops early when a level would be empty.

    Returns the built levels (possibly fewer than M); lengths follow
    T^{i+1} = floor(T^i / k).
    """
    levels: list[Tensor] = []
    cur = f0
    for lv in params.levels:
        if cur.shape[0] < config.k:
            break
        x = temporal_fusion(cur, config.k, config.fusion_mode, lv.fusion)
        for l, blk in enumerate(lv.blocks):
            x = rcdl_block(x, blk, 2 ** l, config.dropout_rate, mode, rng)
        levels.append(x)
        cur = x
    return levels


def causal_segment_mask(t_len: int, seg_len: int, span: int) -> np.ndarray:
    """Admit segment p for query t iff its last covered frame (p+1)*span-1 <= t."""
    last_frame = (np.arange(seg_len) + 1) * span - 1
    return last_frame[None, :] <= np.arange(t_len)[:, None]


def segment_frame_attention(f0: Tensor, levels: list[Tensor], params: ModelParams,
                            config: ModelConfig, causal: bool) -> Tensor:
    """One shared transformer layer per level (frames query segments), then
    concat [F0 | attended levels] along features, zero-filling missing levels."""
    if params.trans is None or params.pos_table is None:
        raise ModelError("model was built without attention parameters")
    t_len = f0.shape[0]
    q = add_positional(f0, params.pos_table)
    parts = [f0]
    for i, fi in enumerate(levels, start=1):
        kv = add_positional(fi, params.pos_table)
        mask = None
        if causal:
            mask = causal_segment_mask(t_len, fi.shape[0], config.k ** i)
        attended = transformer_layer(q, kv, params.trans, mask)
        if mask is not None and not mask.all():
            # queries with no completed segment at this level get a zero row,
            # which keeps full-sequence and prefix-streamed outputs aligned
            keep = np.broadcast_to(mask.any(axis=1)[:, None],
                                   (t_len, config.d)).astype(f0.dtype)
            attended = tz.mul(attended, Tensor(np.ascontiguousarray(keep)))
        parts.append(attended)
    if len(levels) < config.m:
        warnings.warn(
            f"hierarchy depth {len(levels)} < configured {config.m}; "
            "zero-filling the missing attention slots")
        for _ in range(config.m - len(levels)):
            parts.append(Tensor(np.zeros((t_len, config.d), dtype=f0.dtype)))
    return tz.concat_features(parts)


def predict_all(fused: Tensor, levels: list[Tensor], params: ModelParams) -> tuple[Tensor, list[Tensor]]:
    """Per-timestep heads: fused frame head plus one segment head shared by all levels."""
    frame_logits = tz.add_rows(tz.matmul(fused, params.head_fused_w), params.head_fused_b)
    seg_logits = [tz.add_rows(tz.matmul(fi, params.head_seg_w), params.head_seg_b)
                  for fi in levels]
    return frame_logits, seg_logits


def forward(h, params: ModelParams, config: ModelConfig, mode: str = "eval",
            rng: Optional[np.random.Generator] = None) -> ForwardOutput:
    f0 = encode_frames(h, params, config, mode, rng)
    levels = build_hierarchy(f0, params, config, mode, rng)
    if config.use_attention and config.m > 0:
        fused = segment_frame_attention(f0, levels, params, config,
                                        causal=config.causal_attention)
    else:
        fused = f0
    frame_logits, seg_logits = predict_all(fused, levels, params)
    return ForwardOutput(frame_logits=frame_logits, segment_logits=seg_logits,
                         fused=fused)


# ---------------------------------------------------------------------------
# streaming inference


@dataclass
class StreamState:
    """Append-only feature buffer; emitted predictions are never revised."""

    rows: list[np.ndarray] = field(default_factory=list)
    emitted: list[np.ndarray] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.rows)


def stream_step(h_t, state: StreamState, params: ModelParams,
                config: ModelConfig) -> tuple[np.ndarray, StreamState]:
    """Ingest one frame, recompute the causal forward over the prefix, and emit
    class probabilities for the newest frame.

    The emitted row equals (bit for bit) the offline forward on the sequence
    truncated at this frame; causal attention is required.
    """
    if not config.causal_attention:
        raise ModelError("stream_step requires causal_attention=true")
    row = np.asarray(h_t, dtype=params.dtype).reshape(-1)
    if row.shape[0] != config.d_in:
        raise ModelError(f"stream_step: frame width {row.shape[0]} != D_in={config.d_in}")
    state.rows.append(row)
    prefix = np.stack(state.rows, axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # early frames legitimately miss coarse levels
        out = forward(prefix, params, config, mode="eval")
    logits_t = out.frame_logits.data[-1]
    e = np.exp(logits_t - logits_t.max())
    probs = e / e.sum()
    state.emitted.append(probs)
    return probs, state
