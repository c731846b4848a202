"""Backbone building blocks: RMSNorm, RoPE, SwishGLU FFN, causal attention.

Every block exists twice: a taped version built from autodiff ops (training)
and a plain-numpy twin (suffix ``_np``) for incremental decoding. The twins
compute the same formulas; equivalence is covered by tests rather than by
sharing code paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    dense,
    masked_softmax,
    matmul,
    mul,
    reshape,
    rmsnorm,
    rope_rotate,
    scale,
    silu,
    transpose,
)

__all__ = [
    "FFNParams",
    "AttnParams",
    "AttentionCache",
    "rmsnorm",  # re-export: the taped primitive lives in autodiff
    "rmsnorm_np",
    "rope",
    "rope_np",
    "rope_tables",
    "swishglu_ffn",
    "swishglu_ffn_np",
    "causal_attention",
    "causal_attention_step",
    "sigmoid_np",
    "silu_np",
    "softmax_np",
    "NORM_EPS",
    "ROPE_THETA",
]

NORM_EPS = 1e-8
ROPE_THETA = 10000.0


@dataclass
class FFNParams:
    """SwishGLU feed-forward weights, no biases."""

    gate: Tensor  # (d, D)
    up: Tensor  # (d, D)
    down: Tensor  # (D, d_out)

    def tensors(self):
        return [("gate", self.gate), ("up", self.up), ("down", self.down)]


@dataclass
class AttnParams:
    """Multi-head causal attention projections; head_dim must be even."""

    wq: Tensor  # (d, d)
    wk: Tensor  # (d, d)
    wv: Tensor  # (d, d)
    wo: Tensor  # (d, d)
    n_heads: int

    def tensors(self):
        return [("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)]


# ---------------------------------------------------------------------------
# RoPE tables
# ---------------------------------------------------------------------------


def rope_tables(positions, dim: int, theta: float = ROPE_THETA, dtype=np.float64):
    """cos/sin tables of shape positions.shape + (dim // 2,).

    Computed in fp64 and cast down, so fp32 models still share the exact
    same angles as the verification paths.
    """
    if dim % 2:
        raise ShapeError(f"rope dimension must be even, got {dim}")
    pos = np.asarray(positions, dtype=np.float64)
    freqs = theta ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = pos[..., None] * freqs
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope(x: Tensor, position: int, theta: float = ROPE_THETA) -> Tensor:
    """Rotate all vectors in x (last axis even) by one absolute position."""
    cos, sin = rope_tables(position, x.shape[-1], theta, x.dtype)
    return rope_rotate(x, cos, sin)


def rope_np(x: np.ndarray, position, theta: float = ROPE_THETA) -> np.ndarray:
    cos, sin = rope_tables(position, x.shape[-1], theta, x.dtype)
    out = np.empty_like(x)
    xe, xo = x[..., 0::2], x[..., 1::2]
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


# ---------------------------------------------------------------------------
# norms and FFN
# ---------------------------------------------------------------------------


def rmsnorm_np(x: np.ndarray, gain: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    r = np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return gain * x / r


def swishglu_ffn(x: Tensor, p: FFNParams) -> Tensor:
    """down(silu(x @ gate) * (x @ up)); maps (..., d) to (..., d_out)."""
    return dense(mul(silu(dense(x, p.gate)), dense(x, p.up)), p.down)


def _sigmoid_np(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def silu_np(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid_np(x)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return _sigmoid_np(x)


def swishglu_ffn_np(x: np.ndarray, p: FFNParams) -> np.ndarray:
    return (silu_np(x @ p.gate.data) * (x @ p.up.data)) @ p.down.data


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    hi = x.max(axis=axis, keepdims=True)
    e = np.exp(x - hi)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def causal_attention(x: Tensor, p: AttnParams, theta: float = ROPE_THETA) -> Tensor:
    """Batched causal multi-head attention with RoPE on q and k.

    x is (b, s, d) or (s, d); position t attends to positions <= t.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    b, s, d = x.shape
    h = p.n_heads
    hd = d // h

    def heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (b, s, h, hd)), (0, 2, 1, 3))  # (b, h, s, hd)

    q = heads(dense(x, p.wq))
    k = heads(dense(x, p.wk))
    v = heads(dense(x, p.wv))

    cos, sin = rope_tables(np.arange(s), hd, theta, x.dtype)  # (s, hd/2)
    q = rope_rotate(q, cos, sin)
    k = rope_rotate(k, cos, sin)

    logits = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))  # (b, h, s, s)
    causal = np.tril(np.ones((s, s), dtype=bool))
    w = masked_softmax(logits, causal, axis=-1)
    ctx = matmul(w, v)  # (b, h, s, hd)
    out = dense(reshape(transpose(ctx, (0, 2, 1, 3)), (b, s, d)), p.wo)
    return reshape(out, (s, d)) if squeeze else out


class AttentionCache:
    """Backbone KV cache for one decoding sequence (RoPE-rotated keys)."""

    def __init__(self, n_heads: int, head_dim: int, dtype):
        self.k = np.zeros((0, n_heads, head_dim), dtype=dtype)
        self.v = np.zeros((0, n_heads, head_dim), dtype=dtype)

    def __len__(self):
        return self.k.shape[0]


def causal_attention_step(
    x: np.ndarray, p: AttnParams, cache: AttentionCache, position: int, theta: float = ROPE_THETA
) -> np.ndarray:
    """One-token attention; appends this position's k/v to the cache."""
    d = x.shape[-1]
    h = p.n_heads
    hd = d // h
    q = (x @ p.wq.data).reshape(h, hd)
    k = (x @ p.wk.data).reshape(h, hd)
    v = (x @ p.wv.data).reshape(h, hd)
    q = rope_np(q, position, theta)
    k = rope_np(k, position, theta)
    cache.k = np.concatenate([cache.k, k[None]], axis=0)  # (t+1, h, hd)
    cache.v = np.concatenate([cache.v, v[None]], axis=0)
    logits = np.einsum("hd,thd->ht", q, cache.k) / np.sqrt(hd)
    w = softmax_np(logits, axis=-1)
    ctx = np.einsum("ht,thd->hd", w, cache.v).reshape(d)
    return ctx @ p.wo.data
