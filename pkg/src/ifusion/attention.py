"""Multi-head self/cross attention and the pre-norm encoder block.

All blocks run pre-norm: the layer norm sits inside each residual branch.
Cross attention projects the query from one sequence and keys/values from
another using the block's own joint projection; the residual anchors to the
key/value source, so the diagonal (same-source) case reduces exactly to a
plain self-attention encoder block.

Public functions take single sequences of shape (T, D).  The ``*_batched``
variants take (B, T, D) stacks and are what the model and trainer use; the
single-sequence forms are thin B=1 wrappers over the identical code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    ParamStore,
    Parameter,
    Tensor,
    add,
    gelu,
    heads_merge,
    heads_split,
    layer_norm,
    linear,
    matmul,
    reshape,
    scale,
    slice_axis,
    softmax_lastdim,
    transpose,
)


@dataclass
class LayerNormWeights:
    gamma: Parameter
    beta: Parameter

    @classmethod
    def build(cls, store: ParamStore, prefix: str, dim: int) -> "LayerNormWeights":
        return cls(store.ones(f"{prefix}.gamma", dim), store.zeros(f"{prefix}.beta", dim))


@dataclass
class MsaWeights:
    """Joint q/k/v projection across heads plus the output projection.

    ``u_qkv`` columns are laid out [q | k | v], each block h*D_q wide and
    head-major inside; a per-head parameterization is the same weight set
    re-indexed, so the joint layout loses no generality.
    """

    u_qkv: Parameter  # (D, 3*h*D_q)
    w_out: Parameter  # (h*D_q, D)
    heads: int
    head_dim: int
    model_dim: int

    @classmethod
    def build(cls, store: ParamStore, prefix: str, model_dim: int, heads: int) -> "MsaWeights":
        if model_dim % heads:
            raise ConfigError(f"model dim {model_dim} not divisible by {heads} heads")
        head_dim = model_dim // heads
        return cls(
            u_qkv=store.xavier(f"{prefix}.u_qkv", model_dim, 3 * heads * head_dim),
            w_out=store.xavier(f"{prefix}.w_out", heads * head_dim, model_dim),
            heads=heads,
            head_dim=head_dim,
            model_dim=model_dim,
        )


@dataclass
class FfnWeights:
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @classmethod
    def build(cls, store: ParamStore, prefix: str, dim: int, hidden: int) -> "FfnWeights":
        return cls(
            w1=store.xavier(f"{prefix}.w1", dim, hidden),
            b1=store.zeros(f"{prefix}.b1", hidden),
            w2=store.xavier(f"{prefix}.w2", hidden, dim),
            b2=store.zeros(f"{prefix}.b2", dim),
        )


@dataclass
class EncoderBlockWeights:
    ln1: LayerNormWeights
    msa: MsaWeights
    ln2: LayerNormWeights
    ffn: FfnWeights

    @classmethod
    def build(
        cls, store: ParamStore, prefix: str, dim: int, heads: int, ffn_dim: int
    ) -> "EncoderBlockWeights":
        return cls(
            ln1=LayerNormWeights.build(store, f"{prefix}.ln1", dim),
            msa=MsaWeights.build(store, f"{prefix}.msa", dim, heads),
            ln2=LayerNormWeights.build(store, f"{prefix}.ln2", dim),
            ffn=FfnWeights.build(store, f"{prefix}.ffn", dim, ffn_dim),
        )


@dataclass
class AttentionMap:
    """Post-softmax attention probabilities, (heads, T_query, T_keyvalue)."""

    weights: np.ndarray

    def head_mean(self) -> np.ndarray:
        return self.weights.mean(axis=0)


def msa_batched(z_q: Tensor, z_kv: Tensor, w: MsaWeights) -> tuple[Tensor, Tensor]:
    """Multi-head attention with q from ``z_q`` and k/v from ``z_kv``.

    Returns the projected context (B, T_q, D) and the attention
    probabilities (B, h, T_q, T_kv).
    """
    if z_q.shape[-1] != w.model_dim or z_kv.shape[-1] != w.model_dim:
        raise ShapeError(f"msa: inputs {z_q.shape}/{z_kv.shape} vs model dim {w.model_dim}")
    hd = w.heads * w.head_dim
    u = w.u_qkv.value
    q = heads_split(linear(z_q, slice_axis(u, 1, 0, hd)), w.heads)
    k = heads_split(linear(z_kv, slice_axis(u, 1, hd, 2 * hd)), w.heads)
    v = heads_split(linear(z_kv, slice_axis(u, 1, 2 * hd, 3 * hd)), w.heads)
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(w.head_dim))
    attn = softmax_lastdim(scores)
    out = linear(heads_merge(matmul(attn, v)), w.w_out.value)
    return out, attn


def block_batched(z_kv: Tensor, z_q: Tensor, w: EncoderBlockWeights) -> tuple[Tensor, Tensor]:
    """Pre-norm block: attention residual anchored to the k/v source, then FFN.

    With ``z_q is z_kv`` this is the ordinary self-attention encoder block.
    """
    n_q = layer_norm(z_q, w.ln1.gamma.value, w.ln1.beta.value)
    n_kv = n_q if z_q is z_kv else layer_norm(z_kv, w.ln1.gamma.value, w.ln1.beta.value)
    att, attn = msa_batched(n_q, n_kv, w.msa)
    z_hat = add(att, z_kv)
    n2 = layer_norm(z_hat, w.ln2.gamma.value, w.ln2.beta.value)
    h = linear(n2, w.ffn.w1.value, w.ffn.b1.value)
    h = linear(gelu(h), w.ffn.w2.value, w.ffn.b2.value)
    return add(h, z_hat), attn


# ---------------------------------------------------------------------------
# single-sequence surface


def _as_batch(z: Tensor) -> Tensor:
    if z.ndim != 2:
        raise ShapeError(f"expected a (T, D) sequence, got {z.shape}")
    return reshape(z, (1,) + z.shape)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, np.ndarray]:
    """softmax(q k^T / sqrt(D_q)) v for one head.

    Returns the context (T_q, D_q) and the attention probabilities
    (T_q, T_kv) for export.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: q dim {q.shape} vs k dim {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: k rows {k.shape} vs v rows {v.shape}")
    scores = scale(matmul(q, transpose(k, (1, 0))), 1.0 / math.sqrt(q.shape[-1]))
    attn = softmax_lastdim(scores)
    return matmul(attn, v), attn.array.copy()


def msa(z_q: Tensor, z_kv: Tensor, w: MsaWeights) -> tuple[Tensor, AttentionMap]:
    out, attn = msa_batched(_as_batch(z_q), _as_batch(z_kv), w)
    return reshape(out, out.shape[1:]), AttentionMap(attn.array[0].copy())


def encoder_block(z: Tensor, w: EncoderBlockWeights) -> Tensor:
    zb = _as_batch(z)
    out, _ = block_batched(zb, zb, w)
    return reshape(out, out.shape[1:])


def cross_block(z_kv_src: Tensor, z_q_src: Tensor, w: EncoderBlockWeights) -> tuple[Tensor, AttentionMap]:
    if z_kv_src.shape != z_q_src.shape:
        raise ShapeError(f"cross_block: sequences {z_kv_src.shape} vs {z_q_src.shape}")
    kv = _as_batch(z_kv_src)
    q = kv if z_q_src is z_kv_src else _as_batch(z_q_src)
    out, attn = block_batched(kv, q, w)
    return reshape(out, out.shape[1:]), AttentionMap(attn.array[0].copy())
