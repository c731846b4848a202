"""Lookup-expert block: per-token-id FFN experts mixed by a learned router.

Training mode feeds the token embedding through N expert FFNs; after
training those outputs are frozen into a value table so inference is a
table lookup plus a softmax-weighted sum. The gated variant multiplies the
expert mix by sigmoid(h . u).

Token embeddings enter the expert FFNs raw here (no normalization); the
key-value block in :mod:`molkv.kvexperts` normalizes first. The two blocks
intentionally differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, dense, embedding_lookup, mul, reshape, sigmoid, softmax, stack, tensor_sum
from .layers import FFNParams, sigmoid_np, softmax_np, swishglu_ffn, swishglu_ffn_np


@dataclass
class MoLEBlockParams:
    """One expert-bearing layer: shared FFN plus the lookup-expert path."""

    ffn: FFNParams  # shared path, d -> d
    routers: Tensor  # (d, N), column n is router r_n
    experts: list[FFNParams]  # N expert FFNs, d -> d
    gate: Tensor | None = None  # (d,), gated variant only

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def tensors(self):
        out = [("ffn." + n, t) for n, t in self.ffn.tensors()]
        out.append(("routers", self.routers))
        for i, e in enumerate(self.experts):
            out.extend((f"experts.{i}." + n, t) for n, t in e.tensors())
        if self.gate is not None:
            out.append(("gate", self.gate))
        return out


# ---------------------------------------------------------------------------
# routing
# ---------------------------------------------------------------------------


def mole_routing(h, params: MoLEBlockParams):
    """softmax_n(h . r_n); works on (..., d) tensors or plain arrays."""
    if isinstance(h, Tensor):
        return softmax(dense(h, params.routers), axis=-1)
    return softmax_np(np.asarray(h) @ params.routers.data, axis=-1)


# ---------------------------------------------------------------------------
# training mode (taped, batched)
# ---------------------------------------------------------------------------


def mole_expert_terms(h: Tensor, emb: Tensor, params: MoLEBlockParams) -> Tensor:
    """Sum_n s_n FFN_n(e_id), optionally gated; h and emb are (..., d)."""
    s = mole_routing(h, params)  # (..., N)
    vals = stack([swishglu_ffn(emb, e) for e in params.experts], axis=-2)  # (..., N, d)
    mix = tensor_sum(mul(vals, reshape(s, s.shape + (1,))), axis=-2)
    if params.gate is not None:
        g = sigmoid(tensor_sum(mul(h, params.gate), axis=-1, keepdims=True))
        mix = mul(mix, g)
    return mix


def mole_train_forward(h: Tensor, ids, embedding: Tensor, params: MoLEBlockParams) -> Tensor:
    """y = h + FFN(h) + sum_n s_n FFN_n(e_id); embeddings used raw."""
    emb = embedding_lookup(embedding, ids)
    return h + swishglu_ffn(h, params.ffn) + mole_expert_terms(h, emb, params)


# ---------------------------------------------------------------------------
# inference mode (numpy, table-backed)
# ---------------------------------------------------------------------------


def build_value_table(embedding: np.ndarray, params: MoLEBlockParams) -> np.ndarray:
    """Freeze FFN_n(e_i) for all ids into a (|V|, N, d) table."""
    return np.stack([swishglu_ffn_np(embedding, e) for e in params.experts], axis=1)


def _expert_mix_infer(h: np.ndarray, token_id: int, table: np.ndarray, params: MoLEBlockParams) -> np.ndarray:
    if not 0 <= token_id < table.shape[0]:
        raise IndexError(f"token id {token_id} outside value table with {table.shape[0]} ids")
    s = mole_routing(h, params)  # (N,)
    return s @ table[token_id]  # (N,) @ (N, d)


def mole_infer_forward(h: np.ndarray, token_id: int, table: np.ndarray, params: MoLEBlockParams) -> np.ndarray:
    """Ungated lookup form: y = h + FFN(h) + sum_n s_n v_{id,n}."""
    return h + swishglu_ffn_np(h, params.ffn) + _expert_mix_infer(h, token_id, table, params)


def gated_mole_forward(h: np.ndarray, token_id: int, table: np.ndarray, params: MoLEBlockParams) -> np.ndarray:
    """Gated lookup form: the expert mix is scaled by g = sigmoid(h . u)."""
    if params.gate is None:
        raise ValueError("gated forward needs gate parameters")
    g = sigmoid_np(h @ params.gate.data)
    return h + swishglu_ffn_np(h, params.ffn) + g * _expert_mix_infer(h, token_id, table, params)
