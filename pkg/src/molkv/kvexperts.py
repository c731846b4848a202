"""Key-value lookup experts with a sliding window of cached experts.

Each token id owns N (key, value) expert pairs produced by expert FFNs from
the normalized token embedding. A block combines three expert signals:

* the token's own experts, mixed by a router score augmented with the
  non-rotated query-key score (gated by sigmoid(h . u));
* cached experts of the last M preceding tokens, scored with a RoPE-rotated
  query against RoPE-rotated keys plus a second router, pruned to the top-k
  scores and softmax-weighted (gated by sigmoid(h . u'));
* the ordinary shared FFN.

The batched training forward recomputes every key/value from embeddings;
the incremental forward consumes precomputed experts (from the store) and a
per-sequence cache. The two must agree per token, which the tests enforce.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    dense,
    embedding_lookup,
    masked_softmax,
    matmul,
    mul,
    reshape,
    rmsnorm,
    rope_rotate,
    sigmoid,
    softmax,
    stack,
    tensor_sum,
    topk_indices,
    transpose,
)
from .layers import (
    NORM_EPS,
    ROPE_THETA,
    FFNParams,
    rmsnorm_np,
    rope_np,
    rope_tables,
    sigmoid_np,
    softmax_np,
    swishglu_ffn,
    swishglu_ffn_np,
)


class CacheStateError(RuntimeError):
    """Cache positions must advance one token at a time."""


@dataclass
class MoLKVBlockParams:
    """One expert-bearing layer of the key-value variant."""

    ffn: FFNParams  # shared path, d -> d
    query_proj: Tensor  # (d, d')
    routers: Tensor  # (d, N), own-expert path
    new_routers: Tensor  # (d, N), cached-expert path
    gate: Tensor  # (d,)
    new_gate: Tensor  # (d,)
    key_experts: list[FFNParams]  # N FFNs, d -> d'
    value_experts: list[FFNParams]  # N FFNs, d -> d
    vocab_norm: Tensor  # (d,)
    key_norm: Tensor  # (d',)
    value_norm: Tensor  # (d,)
    top_k: int = 1
    rope_theta: float = ROPE_THETA
    norm_eps: float = NORM_EPS

    @property
    def num_experts(self) -> int:
        return len(self.key_experts)

    @property
    def key_dim(self) -> int:
        return self.query_proj.shape[1]

    @property
    def qk_scale(self) -> float:
        return 1.0 / np.sqrt(self.key_dim)

    def tensors(self):
        out = [("ffn." + n, t) for n, t in self.ffn.tensors()]
        out += [
            ("query_proj", self.query_proj),
            ("routers", self.routers),
            ("new_routers", self.new_routers),
            ("gate", self.gate),
            ("new_gate", self.new_gate),
        ]
        for i, e in enumerate(self.key_experts):
            out.extend((f"key_experts.{i}." + n, t) for n, t in e.tensors())
        for i, e in enumerate(self.value_experts):
            out.extend((f"value_experts.{i}." + n, t) for n, t in e.tensors())
        out += [("vocab_norm", self.vocab_norm), ("key_norm", self.key_norm), ("value_norm", self.value_norm)]
        return out


@dataclass
class ExpertKV:
    """The N expert pairs of one token id.

    Keys are post-key-norm but not yet rotated (rotation happens at cache
    insertion, where the absolute position is known). ``values_normed``
    always equals rmsnorm(values, value_norm gain).
    """

    keys: np.ndarray  # (N, d')
    values: np.ndarray  # (N, d), raw
    values_normed: np.ndarray  # (N, d)


def compute_expert_kv(e_id: np.ndarray, params: MoLKVBlockParams) -> ExpertKV:
    """Expert keys/values for one embedding row (or a batch of rows).

    e_id is (d,) or (..., d); outputs gain a leading N axis after the batch
    axes: keys (..., N, d'), values (..., N, d).
    """
    eh = rmsnorm_np(np.asarray(e_id), params.vocab_norm.data, params.norm_eps)
    keys = np.stack(
        [rmsnorm_np(swishglu_ffn_np(eh, ke), params.key_norm.data, params.norm_eps) for ke in params.key_experts],
        axis=-2,
    )
    values = np.stack([swishglu_ffn_np(eh, ve) for ve in params.value_experts], axis=-2)
    return ExpertKV(keys=keys, values=values, values_normed=rmsnorm_np(values, params.value_norm.data, params.norm_eps))


# ---------------------------------------------------------------------------
# sliding-window cache
# ---------------------------------------------------------------------------


@dataclass
class KVExpertCache:
    """RoPE-rotated keys and normalized values of the last M tokens.

    Slots are ordered oldest to newest; positions are consecutive and end
    one before the token currently being decoded.
    """

    window: int  # M
    num_experts: int
    key_dim: int
    hidden_size: int
    dtype: np.dtype = np.dtype(np.float64)
    rope_theta: float = ROPE_THETA
    positions: list[int] = field(default_factory=list)
    keys_rot: np.ndarray = None  # (m, N, d')
    values: np.ndarray = None  # (m, N, d)

    def __post_init__(self):
        if self.keys_rot is None:
            self.keys_rot = np.zeros((0, self.num_experts, self.key_dim), dtype=self.dtype)
        if self.values is None:
            self.values = np.zeros((0, self.num_experts, self.hidden_size), dtype=self.dtype)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def param_count(self) -> int:
        """Cached parameters currently resident: m * N * (d + d')."""
        return len(self.positions) * self.num_experts * (self.hidden_size + self.key_dim)


def cache_insert(cache: KVExpertCache, position: int, kv: ExpertKV) -> KVExpertCache:
    """Rotate keys to ``position``, append, evict the oldest beyond M."""
    if cache.positions:
        if position != cache.positions[-1] + 1:
            raise CacheStateError(f"cache holds ..{cache.positions[-1]}, cannot insert position {position}")
    elif position != 0:
        raise CacheStateError(f"empty cache starts at position 0, got {position}")
    keys_r = rope_np(kv.keys.astype(cache.dtype, copy=False), position, cache.rope_theta)
    cache.positions.append(position)
    cache.keys_rot = np.concatenate([cache.keys_rot, keys_r[None]], axis=0)
    cache.values = np.concatenate([cache.values, kv.values_normed.astype(cache.dtype, copy=False)[None]], axis=0)
    if len(cache.positions) > cache.window:
        cache.positions.pop(0)
        cache.keys_rot = cache.keys_rot[1:]
        cache.values = cache.values[1:]
    return cache


# ---------------------------------------------------------------------------
# incremental (inference-mode) pieces
# ---------------------------------------------------------------------------


def molkv_query(h: np.ndarray, params: MoLKVBlockParams, position: int):
    """(q, q_rotated) for one hidden state."""
    q = h @ params.query_proj.data
    return q, rope_np(q, position, params.rope_theta)


def molkv_new_scores(q_rot: np.ndarray, h: np.ndarray, cache: KVExpertCache, params: MoLKVBlockParams) -> np.ndarray:
    """Flattened (slot-major) scores over the cached experts.

    S[j*N + n] = (K_rot[j, n] . q_rot) / sqrt(d') + (h . new_router_n).
    """
    m = len(cache)
    if m == 0:
        return np.zeros(0, dtype=q_rot.dtype)
    n = cache.num_experts
    qk = cache.keys_rot.reshape(m * n, cache.key_dim) @ q_rot * params.qk_scale
    router = h @ params.new_routers.data  # (N,)
    return qk + np.tile(router, m)


def molkv_select(scores: np.ndarray, k: int):
    """Top-min(k, |S|) indices and their softmax weights; empty in, empty out."""
    if scores.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=scores.dtype)
    idx = topk_indices(scores, k)
    return idx, softmax_np(scores[idx])


def molkv_augmented_routing(h: np.ndarray, q: np.ndarray, kv: ExpertKV, params: MoLKVBlockParams) -> np.ndarray:
    """softmax_n(h . r_n + (q . key_n)/sqrt(d')); q and keys unrotated."""
    logits = h @ params.routers.data + kv.keys @ q * params.qk_scale
    return softmax_np(logits)


def molkv_infer_forward(
    h: np.ndarray,
    token_id: int,
    position: int,
    cache: KVExpertCache,
    kv: ExpertKV,
    params: MoLKVBlockParams,
):
    """One decoded token through the block; returns (y, cache, k_eff).

    ``kv`` holds the store record for ``token_id``. The token's own experts
    join the cache only after its output is computed, so position 0 sees an
    empty window and contributes no cached-expert term. k_eff is the number
    of cached experts actually selected (cost accounting).
    """
    if cache.positions and cache.positions[-1] != position - 1:
        raise CacheStateError(f"cache ends at {cache.positions[-1]}, expected {position - 1}")

    q, q_rot = molkv_query(h, params, position)
    s_own = molkv_augmented_routing(h, q, kv, params)
    g = sigmoid_np(h @ params.gate.data)
    own = g * (s_own @ kv.values)

    scores = molkv_new_scores(q_rot, h, cache, params)
    idx, weights = molkv_select(scores, params.top_k)
    if idx.size:
        flat_vals = cache.values.reshape(-1, cache.hidden_size)
        g_new = sigmoid_np(h @ params.new_gate.data)
        new = g_new * (weights @ flat_vals[idx])
    else:
        new = np.zeros_like(h)

    y = h + swishglu_ffn_np(h, params.ffn) + own + new
    cache_insert(cache, position, kv)
    return y, cache, int(idx.size)


# ---------------------------------------------------------------------------
# batched training mode
# ---------------------------------------------------------------------------


def sliding_window_mask(s: int, window: int) -> np.ndarray:
    """(s, s) boolean; query t sees key j iff t - M <= j <= t - 1."""
    t = np.arange(s)[:, None]
    j = np.arange(s)[None, :]
    return (j < t) & (j >= t - window)


def molkv_expert_terms(h: Tensor, emb: Tensor, params: MoLKVBlockParams, window: int) -> Tensor:
    """Own-expert plus cached-expert contributions for a whole batch.

    h and emb are (b, s, d): the block input and the raw token embeddings.
    Expert keys/values are recomputed from the embeddings at every layer,
    exactly as the training-mode graph requires.
    """
    b, s, d = h.shape
    n = params.num_experts
    dk = params.key_dim

    eh = rmsnorm(emb, params.vocab_norm, params.norm_eps)
    keys = stack(
        [rmsnorm(swishglu_ffn(eh, ke), params.key_norm, params.norm_eps) for ke in params.key_experts], axis=2
    )  # (b, s, N, d')
    values = stack([swishglu_ffn(eh, ve) for ve in params.value_experts], axis=2)  # (b, s, N, d)

    q = dense(h, params.query_proj)  # (b, s, d')

    # Own-token path: router score plus unrotated query-key score.
    router = dense(h, params.routers)  # (b, s, N)
    qk_own = tensor_sum(mul(reshape(q, (b, s, 1, dk)), keys), axis=-1)  # (b, s, N)
    s_own = softmax(router + qk_own * params.qk_scale, axis=-1)
    gate = sigmoid(tensor_sum(mul(h, params.gate), axis=-1, keepdims=True))  # (b, s, 1)
    own = mul(tensor_sum(mul(values, reshape(s_own, (b, s, n, 1))), axis=2), gate)

    # Cached-expert path: rotate queries and keys, score over all position
    # pairs, mask to the strictly causal window, keep the top-k per query.
    cos, sin = rope_tables(np.arange(s), dk, params.rope_theta, h.dtype)
    q_rot = rope_rotate(q, cos, sin)
    k_rot = rope_rotate(keys, cos[:, None, :], sin[:, None, :])  # (b, s, N, d')

    k_flat = transpose(reshape(k_rot, (b, s * n, dk)), (0, 2, 1))  # (b, d', s*N)
    scores = matmul(q_rot, k_flat) * params.qk_scale  # (b, t, j*N + n)
    new_router = dense(h, params.new_routers)  # (b, s, N)
    scores = reshape(
        reshape(scores, (b, s, s, n)) + reshape(new_router, (b, s, 1, n)),
        (b, s, s * n),
    )

    win = np.repeat(sliding_window_mask(s, window), n, axis=1)  # (s, s*N)
    k_eff = min(params.top_k, s * n)
    masked = np.where(win, scores.data, -np.inf)
    order = np.argsort(-masked, axis=-1, kind="stable")[..., :k_eff]
    top_mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(top_mask, order, True, axis=-1)

    weights = masked_softmax(scores, top_mask & win, axis=-1)  # (b, s, s*N)
    v_flat = reshape(rmsnorm(values, params.value_norm, params.norm_eps), (b, s * n, d))
    new_gate = sigmoid(tensor_sum(mul(h, params.new_gate), axis=-1, keepdims=True))
    new = mul(matmul(weights, v_flat), new_gate)

    return own + new


def molkv_train_forward(h: Tensor, ids, embedding: Tensor, params: MoLKVBlockParams, window: int) -> Tensor:
    """Batched block output: y = h + FFN(h) + own experts + cached experts."""
    squeeze = h.ndim == 2
    if squeeze:
        h = reshape(h, (1,) + h.shape)
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    emb = embedding_lookup(embedding, ids)
    y = h + swishglu_ffn(h, params.ffn) + molkv_expert_terms(h, emb, params, window)
    return reshape(y, y.shape[1:]) if squeeze else y
