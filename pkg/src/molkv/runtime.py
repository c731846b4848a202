"""Store-backed incremental decoding with cost accounting.

Each decode step advances one token through embedding, every layer, the
final norm and the output projection, reading the current token's expert
record from the store in expert-bearing layers. Counters track only what
the complexity model budgets: multiply-accumulates of the large matrix
operations (shared FFN, query projection, cached-key scoring, selected
value mixing), parameters resident in RAM, offloaded parameters, and
parameters/bytes loaded per token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .kvexperts import ExpertKV, KVExpertCache, cache_insert, molkv_new_scores, molkv_query, molkv_select
from .layers import AttentionCache, causal_attention_step, rmsnorm_np, sigmoid_np, softmax_np, swishglu_ffn_np
from .mole import MoLEBlockParams
from .model import ModelParams
from .store import ExpertStoreReader


@dataclass
class CostCounters:
    """Cost deltas for one decode step (or an aggregate of steps).

    macs counts large matrix operations only; params_in_ram and
    params_offloaded are levels (not flows) and hold the value observed at
    the most recent step when aggregated.
    """

    macs: int = 0
    params_in_ram: int = 0
    params_offloaded: int = 0
    params_loaded: int = 0
    bytes_loaded: int = 0

    def merge(self, other: "CostCounters") -> None:
        self.macs += other.macs
        self.params_loaded += other.params_loaded
        self.bytes_loaded += other.bytes_loaded
        self.params_in_ram = other.params_in_ram
        self.params_offloaded = other.params_offloaded


@dataclass
class CostRow:
    """Per-(token, layer) record of the decode cost report."""

    token_index: int
    layer: int
    macs: int
    params_loaded: int
    bytes_loaded: int
    cache_len: int

    def as_dict(self) -> dict:
        return {
            "token_index": self.token_index,
            "layer": self.layer,
            "macs": self.macs,
            "params_loaded": self.params_loaded,
            "bytes_loaded": self.bytes_loaded,
            "cache_len": self.cache_len,
        }


class DecoderState:
    """All mutable state of one decoding sequence.

    Expert-bearing models need an open store reader; several states may
    share one reader. Dense models run without a store.
    """

    def __init__(self, params: ModelParams, store: ExpertStoreReader | None = None, dtype=None):
        cfg = params.config
        self.params = params
        self.config = cfg
        self.store = store
        self.dtype = np.dtype(dtype) if dtype is not None else params.dtype
        if cfg.expert_layers and store is None:
            raise ValueError(f"{cfg.kind} decoding requires an expert store")
        if store is not None:
            h = store.header
            want = "molkv" if cfg.kind == "molkv" else "mole"
            if (h.kind, h.vocab_size, h.num_experts, h.hidden_size, h.key_dim) != (
                want,
                cfg.vocab_size,
                cfg.num_experts,
                cfg.hidden_size,
                cfg.key_dim,
            ):
                raise ValueError("store header does not match the model configuration")
            if h.num_expert_layers != len(cfg.expert_layers):
                raise ValueError("store expert-layer count does not match the model configuration")
        self.position = 0
        self.attn_caches = [AttentionCache(cfg.num_heads, cfg.head_dim, self.dtype) for _ in range(cfg.num_layers)]
        self.expert_caches: dict[int, KVExpertCache] = {}
        if cfg.kind == "molkv":
            for li in cfg.expert_layers:
                self.expert_caches[li] = KVExpertCache(
                    window=cfg.cache_window,
                    num_experts=cfg.num_experts,
                    key_dim=cfg.key_dim,
                    hidden_size=cfg.hidden_size,
                    dtype=self.dtype,
                    rope_theta=cfg.rope_theta,
                )
        self.rows: list[CostRow] = []

    @property
    def expert_layer_index(self) -> dict[int, int]:
        return {li: i for i, li in enumerate(self.config.expert_layers)}


def _params_offloaded(cfg: ModelConfig) -> int:
    return len(cfg.expert_layers) * cfg.num_experts * cfg.vocab_size * (cfg.hidden_size + cfg.key_dim)


def decode_step(state: DecoderState, token_id: int):
    """Advance one token; returns (logits over |V|, CostCounters delta)."""
    cfg = state.config
    params = state.params
    token_id = int(token_id)
    if not 0 <= token_id < cfg.vocab_size:
        raise IndexError(f"token id {token_id} outside vocabulary of {cfg.vocab_size}")
    d, big_d = cfg.hidden_size, cfg.ffn_size
    layer_of = state.expert_layer_index
    delta = CostCounters(params_offloaded=_params_offloaded(cfg))
    t = state.position

    x = params.embedding.data[token_id].astype(state.dtype, copy=True)
    for li, layer in enumerate(params.layers):
        a = rmsnorm_np(x, layer.attn_norm.data, cfg.norm_eps)
        x = x + causal_attention_step(a, layer.attn, state.attn_caches[li], t, cfg.rope_theta)
        hn = rmsnorm_np(x, layer.ffn_norm.data, cfg.norm_eps)
        y = swishglu_ffn_np(hn, layer.ffn)
        layer_macs = 3 * d * big_d
        layer_loaded = 0
        layer_bytes = 0
        cache_len = 0

        if layer.has_experts:
            block = layer.block
            record = state.store.read_record(layer_of[li], token_id)
            layer_bytes = state.store.last_read_bytes
            layer_loaded = cfg.expert_record_width
            values = record.values.astype(state.dtype)
            if isinstance(block, MoLEBlockParams):
                s = softmax_np(hn @ block.routers.data)
                mix = s @ values
                if block.gate is not None:
                    mix = sigmoid_np(hn @ block.gate.data) * mix
                y = y + mix
            else:
                cache = state.expert_caches[li]
                cache_len = len(cache)
                kv = ExpertKV(
                    keys=record.keys.astype(state.dtype),
                    values=values,
                    values_normed=rmsnorm_np(values, block.value_norm.data, block.norm_eps),
                )
                q, q_rot = molkv_query(hn, block, t)
                s_own = softmax_np(hn @ block.routers.data + kv.keys @ q * block.qk_scale)
                y = y + sigmoid_np(hn @ block.gate.data) * (s_own @ kv.values)
                scores = molkv_new_scores(q_rot, hn, cache, block)
                idx, weights = molkv_select(scores, block.top_k)
                if idx.size:
                    flat = cache.values.reshape(-1, d)
                    y = y + sigmoid_np(hn @ block.new_gate.data) * (weights @ flat[idx])
                cache_insert(cache, t, kv)
                layer_macs += d * cfg.key_dim + cache_len * cfg.num_experts * cfg.key_dim + int(idx.size) * d

        x = x + y
        delta.macs += layer_macs
        delta.params_loaded += layer_loaded
        delta.bytes_loaded += layer_bytes
        delta.params_in_ram += 3 * d * big_d + (
            cache_len * cfg.num_experts * (d + cfg.key_dim) if li in state.expert_caches else 0
        )
        state.rows.append(
            CostRow(
                token_index=t,
                layer=li,
                macs=layer_macs,
                params_loaded=layer_loaded,
                bytes_loaded=layer_bytes,
                cache_len=cache_len,
            )
        )

    x = rmsnorm_np(x, params.final_norm.data, cfg.norm_eps)
    logits = x @ params.out_proj.data
    state.position += 1
    return logits, delta


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostRowClosedForm:
    """Steady-state per-layer budget: (macs, ram, offloaded, loaded)."""

    macs: int
    params_in_ram: int
    params_offloaded: int
    params_loaded: int


def closed_form_costs(config: ModelConfig) -> dict[str, CostRowClosedForm]:
    """Steady-state per-layer costs, keyed by layer flavor.

    ``expert`` covers expert-bearing layers, ``plain`` the rest. Values
    follow the large-matrix accounting: dense and lookup layers cost 3dD
    MACs; key-value layers add the query projection, the cached-key
    scoring at full window, and the top-k value mixing.
    """
    d, big_d = config.hidden_size, config.ffn_size
    n, dk, m, k = config.num_experts, config.key_dim, config.cache_window, config.top_k
    plain = CostRowClosedForm(macs=3 * d * big_d, params_in_ram=3 * d * big_d, params_offloaded=0, params_loaded=0)
    if config.kind == "dense":
        return {"plain": plain}
    if config.kind in ("mole", "gated-mole"):
        expert = CostRowClosedForm(
            macs=3 * d * big_d,
            params_in_ram=3 * d * big_d,
            params_offloaded=n * config.vocab_size * d,
            params_loaded=n * d,
        )
    else:
        expert = CostRowClosedForm(
            macs=3 * d * big_d + d * dk + m * n * dk + min(k, m * n) * d,
            params_in_ram=3 * d * big_d + m * n * (d + dk),
            params_offloaded=n * config.vocab_size * (d + dk),
            params_loaded=n * (d + dk),
        )
    return {"plain": plain, "expert": expert}


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def sample_token(logits: np.ndarray, sampler: str = "greedy", temperature: float = 1.0, rng=None) -> int:
    if sampler == "greedy":
        return int(np.argmax(logits))
    if sampler == "temperature":
        if rng is None:
            raise ValueError("temperature sampling needs an rng")
        p = softmax_np(logits / max(temperature, 1e-8))
        return int(rng.choice(len(p), p=p))
    raise ValueError(f"unknown sampler {sampler!r}")


def generate(
    state: DecoderState,
    prompt_ids,
    steps: int,
    sampler: str = "greedy",
    temperature: float = 1.0,
    rng=None,
):
    """Consume the prompt, then sample ``steps`` tokens.

    Returns (generated ids, aggregate CostCounters over prompt + steps).
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    prompt_ids = [int(i) for i in np.asarray(prompt_ids).reshape(-1)]
    if not prompt_ids:
        raise ValueError("prompt must contain at least one token")
    total = CostCounters()
    logits = None
    for tok in prompt_ids:
        logits, delta = decode_step(state, tok)
        total.merge(delta)
    out = []
    for _ in range(steps):
        tok = sample_token(logits, sampler, temperature, rng)
        out.append(tok)
        logits, delta = decode_step(state, tok)
        total.merge(delta)
    return out, total
