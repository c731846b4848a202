"""Full-model parameters, initialization, and the batched training forward.

Layers follow the pre-norm residual pattern: attention and FFN each read a
normalized copy of the stream and add their output back to the raw stream.
Expert blocks hang off the FFN sublayer and see the same normalized hidden
state the FFN sees; the raw token embeddings are threaded to every layer so
expert keys/values can be recomputed from them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, cross_entropy_logits, dense, embedding_lookup, parameter
from .config import ModelConfig
from .kvexperts import MoLKVBlockParams, molkv_expert_terms
from .layers import AttnParams, FFNParams, causal_attention, rmsnorm, swishglu_ffn
from .mole import MoLEBlockParams, mole_expert_terms


@dataclass
class LayerParams:
    """One transformer layer; ``block`` is set on expert-bearing layers."""

    attn_norm: Tensor  # (d,)
    attn: AttnParams
    ffn_norm: Tensor  # (d,)
    block: FFNParams | MoLEBlockParams | MoLKVBlockParams

    @property
    def ffn(self) -> FFNParams:
        return self.block if isinstance(self.block, FFNParams) else self.block.ffn

    @property
    def has_experts(self) -> bool:
        return not isinstance(self.block, FFNParams)

    def tensors(self):
        out = [("attn_norm", self.attn_norm)]
        out.extend(("attn." + n, t) for n, t in self.attn.tensors())
        out.append(("ffn_norm", self.ffn_norm))
        prefix = "ffn." if isinstance(self.block, FFNParams) else "block."
        out.extend((prefix + n, t) for n, t in self.block.tensors())
        return out


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: Tensor  # (|V|, d)
    layers: list[LayerParams]
    final_norm: Tensor  # (d,)
    out_proj: Tensor  # (d, |V|)

    @property
    def dtype(self):
        return self.embedding.dtype

    def named_parameters(self):
        """Deterministic (name, tensor) walk; checkpoint and optimizer order."""
        out = [("embedding", self.embedding)]
        for li, layer in enumerate(self.layers):
            out.extend((f"layers.{li}." + n, t) for n, t in layer.tensors())
        out.append(("final_norm", self.final_norm))
        out.append(("out_proj", self.out_proj))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) with samples beyond ``bound`` sigmas redrawn."""
    x = rng.standard_normal(shape)
    while True:
        bad = np.abs(x) > bound
        n_bad = int(bad.sum())
        if not n_bad:
            break
        x[bad] = rng.standard_normal(n_bad)
    return x * std


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float32, init_std: float = 0.02) -> ModelParams:
    """Fresh parameters; norm gains start at one, everything else trunc normal."""
    rng = np.random.default_rng(seed)
    d, big_d, dk = config.hidden_size, config.ffn_size, config.key_dim

    def mat(*shape) -> Tensor:
        return parameter(trunc_normal(rng, shape, init_std), dtype=dtype)

    def gain(n) -> Tensor:
        return parameter(np.ones(n), dtype=dtype)

    def ffn(d_out) -> FFNParams:
        return FFNParams(gate=mat(d, big_d), up=mat(d, big_d), down=mat(big_d, d_out))

    embedding = mat(config.vocab_size, d)
    layers = []
    expert_set = set(config.expert_layers)
    for li in range(config.num_layers):
        attn = AttnParams(wq=mat(d, d), wk=mat(d, d), wv=mat(d, d), wo=mat(d, d), n_heads=config.num_heads)
        if li not in expert_set:
            block: FFNParams | MoLEBlockParams | MoLKVBlockParams = ffn(d)
        elif config.kind in ("mole", "gated-mole"):
            block = MoLEBlockParams(
                ffn=ffn(d),
                routers=mat(d, config.num_experts),
                experts=[ffn(d) for _ in range(config.num_experts)],
                gate=mat(d) if config.kind == "gated-mole" else None,
            )
        else:
            block = MoLKVBlockParams(
                ffn=ffn(d),
                query_proj=mat(d, dk),
                routers=mat(d, config.num_experts),
                new_routers=mat(d, config.num_experts),
                gate=mat(d),
                new_gate=mat(d),
                key_experts=[FFNParams(gate=mat(d, big_d), up=mat(d, big_d), down=mat(big_d, dk)) for _ in range(config.num_experts)],
                value_experts=[ffn(d) for _ in range(config.num_experts)],
                vocab_norm=gain(d),
                key_norm=gain(dk),
                value_norm=gain(d),
                top_k=config.top_k,
                rope_theta=config.rope_theta,
                norm_eps=config.norm_eps,
            )
        layers.append(LayerParams(attn_norm=gain(d), attn=attn, ffn_norm=gain(d), block=block))
    return ModelParams(
        config=config,
        embedding=embedding,
        layers=layers,
        final_norm=gain(d),
        out_proj=mat(d, config.vocab_size),
    )


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def forward(params: ModelParams, ids) -> Tensor:
    """Training-mode logits for a (b, s) batch of token ids."""
    cfg = params.config
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    emb = embedding_lookup(params.embedding, ids)  # (b, s, d)
    x = emb
    for layer in params.layers:
        a = rmsnorm(x, layer.attn_norm, cfg.norm_eps)
        x = x + causal_attention(a, layer.attn, cfg.rope_theta)
        hn = rmsnorm(x, layer.ffn_norm, cfg.norm_eps)
        delta = swishglu_ffn(hn, layer.ffn)
        if layer.has_experts:
            if isinstance(layer.block, MoLEBlockParams):
                delta = delta + mole_expert_terms(hn, emb, layer.block)
            else:
                delta = delta + molkv_expert_terms(hn, emb, layer.block, cfg.cache_window)
        x = x + delta
    x = rmsnorm(x, params.final_norm, cfg.norm_eps)
    return dense(x, params.out_proj)


def next_token_loss(params: ModelParams, batch) -> Tensor:
    """Mean cross-entropy of predicting batch[:, 1:] from batch[:, :-1]."""
    batch = np.asarray(batch)
    if batch.ndim == 1:
        batch = batch[None, :]
    logits = forward(params, batch[:, :-1])
    return cross_entropy_logits(logits, batch[:, 1:])
