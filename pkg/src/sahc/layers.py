"""Parameterized layers: causal dilated residual blocks, temporal fusion,
positional encoding, cross-attention and the transformer layer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as tz
from .tensor import Tensor

LAYER_NORM_EPS = 1e-5
CONV_KERNEL_WIDTH = 3  # all residual causal blocks use width-3 kernels


class LayerError(ValueError):
    """Contract violation in a layer call (bad shapes or arguments)."""


@dataclass
class Conv1DParams:
    w: Tensor  # [k_w, D_in, D_out]
    b: Tensor  # [D_out]


@dataclass
class RCDLParams:
    """One residual causal dilated block: a dilated conv and a 1x1 conv."""
    dilated: Conv1DParams
    pointwise: Conv1DParams


@dataclass
class AttentionParams:
    wq: list[Tensor]  # per head, [D, D/N_head]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor        # [D, D]

    @property
    def n_heads(self) -> int:
        return len(self.wq)


@dataclass
class TransLayerParams:
    attn: AttentionParams
    ffn_w1: Tensor   # [D, D_ff]
    ffn_b1: Tensor
    ffn_w2: Tensor   # [D_ff, D]
    ffn_b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


def causal_dilated_conv1d(x: Tensor, params: Conv1DParams, dilation: int) -> Tensor:
    """Length-preserving causal conv: output t reads x at {t - j*dilation}."""
    if dilation < 1:
        raise LayerError(f"dilation must be a positive int, got {dilation}")
    k_w = params.w.shape[0]
    return tz.conv1d(x, params.w, params.b, stride=1, dilation=dilation,
                     left_pad=(k_w - 1) * dilation)


def rcdl_block(x: Tensor, block: RCDLParams, dilation: int, dropout_rate: float,
               mode: str, rng: Optional[np.random.Generator] = None) -> Tensor:
    """x + pointwise(dropout(relu(dilated_conv(x)))), the residual causal block."""
    d = x.shape[1]
    if block.dilated.w.shape[1] != d or block.pointwise.w.shape[2] != d:
        raise LayerError(
            f"rcdl_block: feature dim {d} does not match params "
            f"{block.dilated.w.shape} / {block.pointwise.w.shape}")
    z = tz.relu(causal_dilated_conv1d(x, block.dilated, dilation))
    z = tz.dropout(z, dropout_rate, rng, training=(mode == "train"))
    return tz.add(x, tz.conv1d(z, block.pointwise.w, block.pointwise.b))


def temporal_fusion(x: Tensor, k: int, mode: str,
                    conv_params: Optional[Conv1DParams] = None) -> Tensor:
    """Aggregate non-overlapping k-frame windows into one segment feature each.

    Output p covers exactly rows [p*k, (p+1)*k); the trailing T mod k rows are
    dropped, so the output length is floor(T/k).
    """
    if k < 1:
        raise LayerError(f"fusion kernel must be positive, got {k}")
    if x.shape[0] < k:
        raise LayerError(
            f"temporal_fusion: sequence of length {x.shape[0]} is shorter than "
            f"window {k}; reduce the hierarchy depth for this input")
    if mode == "max":
        return tz.max_pool1d(x, k)
    if mode == "avg":
        return tz.avg_pool1d(x, k)
    if mode == "conv":
        if conv_params is None:
            raise LayerError("conv fusion requires Conv1DParams")
        if conv_params.w.shape[0] != k:
            raise LayerError(
                f"conv fusion kernel width {conv_params.w.shape[0]} != stride {k}")
        return tz.conv1d(x, conv_params.w, conv_params.b, stride=k)
    raise LayerError(f"unknown fusion mode {mode!r}")


def add_positional(x: Tensor, table: Tensor) -> Tensor:
    """x + E[0:T] from a learned positional table of capacity T_max."""
    t = x.shape[0]
    if t > table.shape[0]:
        raise LayerError(
            f"sequence length {t} exceeds positional capacity {table.shape[0]}")
    return tz.add(x, tz.slice_time(table, 0, t))


def multi_head_cross_attention(q: Tensor, kv: Tensor, params: AttentionParams,
                               mask: Optional[np.ndarray] = None) -> Tensor:
    """softmax(Q K^T / sqrt(D)) V per head, heads concatenated then projected.

    ``mask`` is [T_q, T_k] boolean; False keys are excluded from the softmax
    and a query row with no admitted key comes out as the zero vector (the
    projections carry no bias, so zeros survive the output projection).
    """
    d = q.shape[1]
    if kv.shape[1] != d:
        raise LayerError(f"attention: query dim {d} != key/value dim {kv.shape[1]}")
    if mask is not None and mask.shape != (q.shape[0], kv.shape[0]):
        raise LayerError(
            f"attention: mask shape {mask.shape} != ({q.shape[0]}, {kv.shape[0]})")
    inv_sqrt_d = 1.0 / math.sqrt(d)
    heads = []
    for wq, wk, wv in zip(params.wq, params.wk, params.wv):
        qi = tz.matmul(q, wq)
        ki = tz.matmul(kv, wk)
        vi = tz.matmul(kv, wv)
        scores = tz.scale(tz.matmul(qi, tz.transpose(ki)), inv_sqrt_d)
        if mask is None:
            weights = tz.softmax(scores, axis=-1)
        else:
            weights = tz.masked_softmax(scores, mask)
        heads.append(tz.matmul(weights, vi))
    return tz.matmul(tz.concat_features(heads), params.wo)


def feed_forward(x: Tensor, params: TransLayerParams) -> Tensor:
    h = tz.relu(tz.add_rows(tz.matmul(x, params.ffn_w1), params.ffn_b1))
    return tz.add_rows(tz.matmul(h, params.ffn_w2), params.ffn_b2)


def transformer_layer(q: Tensor, kv: Tensor, params: TransLayerParams,
                      mask: Optional[np.ndarray] = None) -> Tensor:
    """Pre-softmax masked cross-attention with residual + layernorm, then FFN."""
    attended = multi_head_cross_attention(q, kv, params.attn, mask)
    out1 = tz.layer_norm(tz.add(q, attended), params.ln1_gain, params.ln1_bias,
                         eps=LAYER_NORM_EPS)
    out2 = tz.layer_norm(tz.add(out1, feed_forward(out1, params)),
                         params.ln2_gain, params.ln2_bias, eps=LAYER_NORM_EPS)
    return out2
