"""Multi-head attention, the post-norm transformer decoder unit, and
sinusoidal positions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    add_const,
    bmm,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scale,
    softmax_lastdim,
    swapaxes,
    tensor_create,
)

MASK_VALUE = -1e9


@dataclass
class AttentionParams:
    """Projections for ``heads`` heads. Head ``h`` uses columns
    ``h*D/H:(h+1)*D/H`` of ``w_q``/``w_k``/``w_v``."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]


@dataclass
class DecoderUnitParams:
    self_attn: AttentionParams
    cross_attn: AttentionParams
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ln3_gain: Tensor
    ln3_bias: Tensor


def init_attention(dim: int, heads: int, rng: np.random.Generator) -> AttentionParams:
    if dim % heads:
        raise ShapeError(f"feature dim {dim} not divisible by {heads} heads")
    mk = lambda: tensor_create((dim, dim), "xavier", rng=rng, requires_grad=True)
    return AttentionParams(mk(), mk(), mk(), mk(), heads)


def init_decoder_unit(dim: int, heads: int, ffn_dim: int, rng: np.random.Generator) -> DecoderUnitParams:
    ones = lambda n: tensor_create((n,), "ones", requires_grad=True)
    zeros = lambda n: tensor_create((n,), "zeros", requires_grad=True)
    return DecoderUnitParams(
        self_attn=init_attention(dim, heads, rng),
        cross_attn=init_attention(dim, heads, rng),
        ffn_w1=tensor_create((dim, ffn_dim), "xavier", rng=rng, requires_grad=True),
        ffn_b1=zeros(ffn_dim),
        ffn_w2=tensor_create((ffn_dim, dim), "xavier", rng=rng, requires_grad=True),
        ffn_b2=zeros(dim),
        ln1_gain=ones(dim), ln1_bias=zeros(dim),
        ln2_gain=ones(dim), ln2_bias=zeros(dim),
        ln3_gain=ones(dim), ln3_bias=zeros(dim),
    )


def key_mask_bias(mask: np.ndarray | None) -> np.ndarray | None:
    """Turn a boolean validity mask ``[..., n_kv]`` into an additive score
    bias broadcastable against ``[..., H, n_q, n_kv]``."""
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    bias = np.where(mask, 0.0, MASK_VALUE)
    return bias[..., None, None, :]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = reshape(x, (*lead, n, heads, d // heads))
    return swapaxes(x, -2, -3)


def multi_head_attention(
    queries: Tensor,
    keys_values: Tensor,
    params: AttentionParams,
    key_mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention of ``queries [..., n_q, D]`` over
    ``keys_values [..., n_kv, D]``. Invalid keys (``key_mask`` False) get a
    -1e9 score bias."""
    d = params.dim
    if queries.shape[-1] != d or keys_values.shape[-1] != d:
        raise ShapeError(
            f"attention expects feature dim {d}, got {queries.shape[-1]} and {keys_values.shape[-1]}"
        )
    if queries.shape[:-2] != keys_values.shape[:-2]:
        raise ShapeError(f"leading dims differ: {queries.shape} vs {keys_values.shape}")
    h = params.heads
    q = _split_heads(matmul(queries, params.w_q), h)
    k = _split_heads(matmul(keys_values, params.w_k), h)
    v = _split_heads(matmul(keys_values, params.w_v), h)
    scores = scale(bmm(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(d // h))
    weights = softmax_lastdim(scores, key_mask_bias(key_mask))
    ctx = swapaxes(bmm(weights, v), -2, -3)
    out = matmul(reshape(ctx, queries.shape), params.w_o)
    if return_weights:
        return out, weights
    return out


def decoder_unit(
    queries: Tensor,
    memory: Tensor,
    params: DecoderUnitParams,
    query_mask: np.ndarray | None = None,
    memory_mask: np.ndarray | None = None,
    eps: float = 1e-5,
) -> Tensor:
    """Post-norm unit: self-attention, cross-attention over ``memory``, FFN,
    each with a residual and layer norm. ``query_mask`` hides padded query
    rows from the self-attention keys."""
    x = queries
    x = layer_norm(add(x, multi_head_attention(x, x, params.self_attn, query_mask)),
                   params.ln1_gain, params.ln1_bias, eps)
    x = layer_norm(add(x, multi_head_attention(x, memory, params.cross_attn, memory_mask)),
                   params.ln2_gain, params.ln2_bias, eps)
    hidden = gelu(add(matmul(x, params.ffn_w1), params.ffn_b1))
    ff = add(matmul(hidden, params.ffn_w2), params.ffn_b2)
    return layer_norm(add(x, ff), params.ln3_gain, params.ln3_bias, eps)


def decoder_stack(queries, memory, units, query_mask=None, memory_mask=None, eps=1e-5) -> Tensor:
    x = queries
    for unit in units:
        x = decoder_unit(x, memory, unit, query_mask, memory_mask, eps)
    return x


@dataclass(frozen=True)
class PositionalTable:
    table: np.ndarray

    @classmethod
    def build(cls, max_len: int, dim: int) -> "PositionalTable":
        pos = np.arange(max_len, dtype=np.float64)[:, None]
        i = np.arange(0, dim, 2, dtype=np.float64)
        freq = np.exp(-np.log(10000.0) * i / dim)
        table = np.zeros((max_len, dim))
        table[:, 0::2] = np.sin(pos * freq)
        table[:, 1::2] = np.cos(pos * freq)[:, : dim // 2]
        return cls(table)

    @property
    def max_len(self) -> int:
        return self.table.shape[0]


def positional_add(tokens: Tensor, table: PositionalTable, offset: int = 0) -> Tensor:
    n = tokens.shape[-2]
    if offset < 0 or offset + n > table.max_len:
        raise IndexError(f"positions {offset}..{offset + n} exceed table length {table.max_len}")
    return add_const(tokens, table.table[offset:offset + n])
