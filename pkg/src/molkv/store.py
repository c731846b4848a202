"""Reparameterized expert tables and their on-disk store.

After training, every (layer, token id) pair owns a fixed expert record:
raw expert values for lookup models, key/value pairs for the key-value
variant (keys post-key-norm, values raw). The store file emulates expert
offloading: records have a fixed size, live at computable offsets, and a
read touches exactly one record's bytes, which the reader counts.

File layout (little-endian, documented in docs/formats.md):

    offset  size  field
    0       4     magic "MLKV"
    4       4     u32 format version (1)
    8       4     u32 model kind (1 = lookup values only, 2 = key-value)
    12      4     u32 dtype code (0 = fp32, 1 = fp16, 2 = fp64)
    16      4     u32 layout constant (1 = layer-major, id-major)
    20      4     u32 expert layer count
    24      8     u64 vocabulary size
    32      4     u32 experts per id (N)
    36      4     u32 hidden size (d)
    40      4     u32 key size (d', 0 when absent)
    44      20    zero padding
    64      ...   records

Record (layer L, id i) starts at 64 + (L * |V| + i) * N * (d + d') * itemsize
and holds, for each expert n in order: d' key values, then d raw values.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .kvexperts import compute_expert_kv
from .mole import build_value_table

MAGIC = b"MLKV"
FORMAT_VERSION = 1
LAYOUT_LAYER_MAJOR = 1
HEADER_SIZE = 64
_HEADER_STRUCT = struct.Struct("<4s5IQ3I20x")

KIND_CODES = {"mole": 1, "molkv": 2}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
DTYPE_CODES = {"fp32": 0, "fp16": 1, "fp64": 2}
DTYPE_NAMES = {v: k for k, v in DTYPE_CODES.items()}
NUMPY_DTYPES = {"fp32": np.dtype("<f4"), "fp16": np.dtype("<f2"), "fp64": np.dtype("<f8")}

PARAM_CONVENTIONS = ("experts-only", "backbone-only", "experts+backbone")


class StoreFormatError(ValueError):
    """Bad magic, version, or header field."""


class RecordLookupError(IndexError):
    """(layer, id) outside the store extents."""


@dataclass(frozen=True)
class ExpertStoreHeader:
    kind: str  # "mole" | "molkv"
    dtype: str  # "fp32" | "fp16" | "fp64"
    num_expert_layers: int
    vocab_size: int
    num_experts: int
    hidden_size: int
    key_dim: int  # 0 for mole

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise StoreFormatError(f"unknown store kind {self.kind!r}")
        if self.dtype not in DTYPE_CODES:
            raise StoreFormatError(f"unknown store dtype {self.dtype!r}")
        for name in ("num_expert_layers", "vocab_size", "num_experts", "hidden_size"):
            if getattr(self, name) < 1:
                raise StoreFormatError(f"header field {name} must be >= 1")
        if self.kind == "mole" and self.key_dim != 0:
            raise StoreFormatError("lookup-value store carries no keys, key_dim must be 0")
        if self.kind == "molkv" and self.key_dim < 1:
            raise StoreFormatError("key-value store requires key_dim >= 1")

    @property
    def record_values(self) -> int:
        """Scalars per record: N * (d + d')."""
        return self.num_experts * (self.hidden_size + self.key_dim)

    @property
    def record_bytes(self) -> int:
        return self.record_values * NUMPY_DTYPES[self.dtype].itemsize

    def record_offset(self, layer: int, token_id: int) -> int:
        if not 0 <= layer < self.num_expert_layers:
            raise RecordLookupError(f"layer {layer} outside 0..{self.num_expert_layers - 1}")
        if not 0 <= token_id < self.vocab_size:
            raise RecordLookupError(f"token id {token_id} outside 0..{self.vocab_size - 1}")
        return HEADER_SIZE + (layer * self.vocab_size + token_id) * self.record_bytes

    def encode(self) -> bytes:
        return _HEADER_STRUCT.pack(
            MAGIC,
            FORMAT_VERSION,
            KIND_CODES[self.kind],
            DTYPE_CODES[self.dtype],
            LAYOUT_LAYER_MAJOR,
            self.num_expert_layers,
            self.vocab_size,
            self.num_experts,
            self.hidden_size,
            self.key_dim,
        )

    @classmethod
    def decode(cls, raw: bytes) -> "ExpertStoreHeader":
        if len(raw) < HEADER_SIZE:
            raise StoreFormatError(f"truncated header: {len(raw)} bytes")
        magic, version, kind, dtype, layout, layers, vocab, n, d, dk = _HEADER_STRUCT.unpack(raw[:HEADER_SIZE])
        if magic != MAGIC:
            raise StoreFormatError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise StoreFormatError(f"unsupported format version {version}")
        if layout != LAYOUT_LAYER_MAJOR:
            raise StoreFormatError(f"unknown layout constant {layout}")
        if kind not in KIND_NAMES or dtype not in DTYPE_NAMES:
            raise StoreFormatError(f"unknown kind/dtype codes ({kind}, {dtype})")
        return cls(
            kind=KIND_NAMES[kind],
            dtype=DTYPE_NAMES[dtype],
            num_expert_layers=layers,
            vocab_size=vocab,
            num_experts=n,
            hidden_size=d,
            key_dim=dk,
        )


@dataclass
class ExpertRecord:
    """One (layer, id) record: keys may be None for lookup-value stores."""

    keys: np.ndarray | None  # (N, d')
    values: np.ndarray  # (N, d)


# ---------------------------------------------------------------------------
# reparameterization
# ---------------------------------------------------------------------------


@dataclass
class ReparamTables:
    """In-memory expert tables for every expert layer, pre-export.

    Arrays keep the training dtype; casting happens at write time.
    """

    kind: str  # "mole" | "molkv"
    vocab_size: int
    num_experts: int
    hidden_size: int
    key_dim: int
    keys: list[np.ndarray] | None  # per expert layer: (|V|, N, d')
    values: list[np.ndarray]  # per expert layer: (|V|, N, d), raw

    @property
    def num_expert_layers(self) -> int:
        return len(self.values)

    def record(self, layer: int, token_id: int) -> ExpertRecord:
        return ExpertRecord(
            keys=None if self.keys is None else self.keys[layer][token_id],
            values=self.values[layer][token_id],
        )


def reparameterize(model) -> ReparamTables:
    """Freeze a trained model's expert FFNs into lookup tables.

    Lookup models store FFN_n(e_i); key-value models store the post-norm
    expert keys and the raw expert values from the normalized embedding.
    """
    cfg: ModelConfig = model.config
    if cfg.kind == "dense":
        raise ValueError("dense models have no experts to reparameterize")
    emb = model.embedding.data
    keys: list[np.ndarray] | None = [] if cfg.kind == "molkv" else None
    values: list[np.ndarray] = []
    for li in cfg.expert_layers:
        block = model.layers[li].block
        if cfg.kind == "molkv":
            kv = compute_expert_kv(emb, block)
            keys.append(kv.keys)
            values.append(kv.values)
        else:
            values.append(build_value_table(emb, block))
    return ReparamTables(
        kind="molkv" if cfg.kind == "molkv" else "mole",
        vocab_size=cfg.vocab_size,
        num_experts=cfg.num_experts,
        hidden_size=cfg.hidden_size,
        key_dim=cfg.key_dim,
        keys=keys,
        values=values,
    )


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def write_store(tables: ReparamTables, path, dtype: str = "fp32") -> ExpertStoreHeader:
    """Write tables to ``path``; returns the header that was written."""
    if dtype not in NUMPY_DTYPES:
        raise StoreFormatError(f"unsupported store dtype {dtype!r}")
    header = ExpertStoreHeader(
        kind=tables.kind,
        dtype=dtype,
        num_expert_layers=tables.num_expert_layers,
        vocab_size=tables.vocab_size,
        num_experts=tables.num_experts,
        hidden_size=tables.hidden_size,
        key_dim=tables.key_dim,
    )
    nd = NUMPY_DTYPES[dtype]
    with open(path, "wb") as f:
        f.write(header.encode())
        for li in range(tables.num_expert_layers):
            if tables.keys is not None:
                rec = np.concatenate([tables.keys[li], tables.values[li]], axis=-1)
            else:
                rec = tables.values[li]
            f.write(np.ascontiguousarray(rec, dtype=nd).tobytes())
    return header


class ExpertStoreReader:
    """Random-access reads with byte accounting; safe for concurrent readers.

    Every read is a positioned read of exactly one record; ``bytes_read``
    and ``last_read_bytes`` expose the transfer sizes the offloading model
    budgets for.
    """

    def __init__(self, path):
        self.path = str(path)
        self._fd = os.open(self.path, os.O_RDONLY)
        try:
            self.header = ExpertStoreHeader.decode(os.pread(self._fd, HEADER_SIZE, 0))
        except Exception:
            os.close(self._fd)
            raise
        expected = HEADER_SIZE + self.header.num_expert_layers * self.header.vocab_size * self.header.record_bytes
        actual = os.fstat(self._fd).st_size
        if actual != expected:
            os.close(self._fd)
            raise StoreFormatError(f"store size {actual} does not match header-implied {expected}")
        self.bytes_read = 0
        self.reads = 0
        self.last_read_bytes = 0

    def read_record(self, layer: int, token_id: int) -> ExpertRecord:
        h = self.header
        raw = os.pread(self._fd, h.record_bytes, h.record_offset(layer, token_id))
        if len(raw) != h.record_bytes:
            raise StoreFormatError(f"short read at (layer={layer}, id={token_id})")
        self.bytes_read += len(raw)
        self.last_read_bytes = len(raw)
        self.reads += 1
        flat = np.frombuffer(raw, dtype=NUMPY_DTYPES[h.dtype]).reshape(h.num_experts, h.hidden_size + h.key_dim)
        if h.key_dim:
            return ExpertRecord(keys=flat[:, : h.key_dim].copy(), values=flat[:, h.key_dim :].copy())
        return ExpertRecord(keys=None, values=flat.copy())

    def close(self):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------


def count_params(config: ModelConfig, convention: str) -> int:
    """Closed-form parameter count under a named convention.

    experts-only: the offloadable tables, per expert layer N * |V| * (d + d').
    backbone-only: everything RAM-resident (embeddings, output head,
    attention, FFNs, norms, routers/gates/query projections). Cached copies
    of expert records do not count; they are not distinct parameters.
    experts+backbone: the sum of the two.
    """
    if convention not in PARAM_CONVENTIONS:
        raise ValueError(f"unknown convention {convention!r}; expected one of {PARAM_CONVENTIONS}")
    d, big_d, v = config.hidden_size, config.ffn_size, config.vocab_size
    n, dk = config.num_experts, config.key_dim
    n_expert_layers = len(config.expert_layers)

    experts = n_expert_layers * n * v * (d + dk)
    if convention == "experts-only":
        return experts

    backbone = v * d + d * v + d  # embedding, output projection, final norm
    backbone += config.num_layers * (4 * d * d + 3 * d * big_d + 2 * d)  # attention, ffn, two norms
    if config.kind in ("mole", "gated-mole"):
        per_layer = d * n + (d if config.kind == "gated-mole" else 0)
        backbone += n_expert_layers * per_layer
    elif config.kind == "molkv":
        # query projection, both routers, both gates, vocab/key/value norms;
        # the training-mode expert FFNs are reparameterized away and excluded.
        per_layer = d * dk + 2 * d * n + 2 * d + (2 * d + dk)
        backbone += n_expert_layers * per_layer
    if convention == "backbone-only":
        return backbone
    return experts + backbone
