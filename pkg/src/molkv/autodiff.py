"""Dense tensors with reverse-mode differentiation on an explicit tape.

Arrays are row-major numpy buffers in fp32 or fp64. Every differentiable
operation records a node on the active tape (a thread-local stack), and
``backward`` replays the nodes in reverse to accumulate gradients into the
leaves. Inference code simply runs with no tape active and pays no
recording cost.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "GraphError",
    "ShapeError",
    "constant",
    "parameter",
    "add",
    "mul",
    "scale",
    "matmul",
    "dense",
    "silu",
    "sigmoid",
    "reshape",
    "transpose",
    "stack",
    "tensor_sum",
    "softmax",
    "masked_softmax",
    "rmsnorm",
    "rope_rotate",
    "embedding_lookup",
    "cross_entropy_logits",
    "topk_indices",
    "backward",
    "grad_check",
]

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """Tape misuse: non-scalar loss, double backward, wrong-precision leaves."""


class Tensor:
    """A dense fp32/fp64 array plus gradient bookkeeping.

    The data buffer is treated as immutable once the tensor participates in
    a taped computation; gradients land in ``.grad`` (accumulated across
    backward calls, cleared by the caller).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar; everything routes through the module-level ops so the
    # tape sees a single implementation of each rule.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=False)


def parameter(data, dtype=None) -> Tensor:
    """A leaf tensor that collects gradients."""
    return Tensor(data, dtype=dtype, requires_grad=True)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of operations; inputs of a node always precede it."""

    _local = threading.local()

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    @classmethod
    def active(cls):
        stack = getattr(cls._local, "stack", None)
        return stack[-1] if stack else None

    def __enter__(self):
        stack = getattr(Tape._local, "stack", None)
        if stack is None:
            stack = Tape._local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._local.stack.pop()
        return False


def _record(out: Tensor, inputs, vjp) -> Tensor:
    tape = Tape.active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(inputs), vjp))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data + b.data)
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from e

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data * b.data)
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp for large |x|.
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(s.astype(d.dtype, copy=False))

    def vjp(g):
        return (g * s * (1.0 - s),)

    return _record(out, (x,), vjp)


def silu(x: Tensor) -> Tensor:
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor((d * s).astype(d.dtype, copy=False))

    def vjp(g):
        return (g * (s + d * s * (1.0 - s)),)

    return _record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and structure
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the last two axes; leading axes follow numpy."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul expects >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), vjp)


def dense(x: Tensor, w: Tensor) -> Tensor:
    """x @ w for x of shape (..., i) and w of shape (i, o)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense: {x.shape} @ {w.shape}")
    if x.ndim == 1:
        y = reshape(matmul(reshape(x, (1, x.shape[0])), w), (w.shape[1],))
        return y
    return matmul(x, w)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"reshape {x.shape} -> {shape}: element counts differ")
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = Tensor(np.transpose(x.data, axes))
    return _record(out, (x,), lambda g: (np.transpose(g, inv),))


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def vjp(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return _record(out, tuple(tensors), vjp)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _record(out, (x,), vjp)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` for integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[ids])

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(out, (table,), vjp)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def masked_softmax(x: Tensor, mask, axis: int = -1) -> Tensor:
    """Softmax over unmasked entries; fully masked slices come out all-zero.

    ``mask`` is a boolean array broadcastable to ``x``; True marks entries
    that participate. No NaN or inf ever reaches the output.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    d = x.data
    neg = np.finfo(d.dtype).min
    hi = np.max(np.where(m, d, neg), axis=axis, keepdims=True)
    hi = np.where(hi > neg / 2, hi, 0.0)  # fully masked slice: any finite pivot
    e = np.where(m, np.exp(np.where(m, d - hi, 0.0)), 0.0)
    tot = e.sum(axis=axis, keepdims=True)
    y = e / np.where(tot == 0.0, 1.0, tot)
    out = Tensor(y.astype(d.dtype, copy=False))

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _record(out, (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return masked_softmax(x, np.ones(x.shape, dtype=bool), axis=axis)


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood in nats; targets are integer ids."""
    t = np.asarray(targets).reshape(-1)
    z = logits.data.reshape(-1, logits.shape[-1])
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"cross entropy: {z.shape[0]} rows vs {t.shape[0]} targets")
    hi = z.max(axis=-1, keepdims=True)
    lse = hi[:, 0] + np.log(np.exp(z - hi).sum(axis=-1))
    n = z.shape[0]
    loss = (lse - z[np.arange(n), t]).mean()
    out = Tensor(np.asarray(loss, dtype=z.dtype))

    def vjp(g):
        p = np.exp(z - hi)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), t] -= 1.0
        g_scalar = float(np.asarray(g).reshape(-1)[0])
        return ((g_scalar / n) * p.reshape(logits.shape),)

    return _record(out, (logits,), vjp)


# ---------------------------------------------------------------------------
# normalization and rotation
# ---------------------------------------------------------------------------


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-8) -> Tensor:
    """gain * x / sqrt(mean(x^2, last axis) + eps)."""
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"rmsnorm gain {gain.shape} does not match last axis of {x.shape}")
    d = x.data
    n = d.shape[-1]
    r = np.sqrt((d * d).mean(axis=-1, keepdims=True) + eps)
    xh = d / r
    out = Tensor(gain.data * xh)

    def vjp(g):
        gy = g * gain.data
        gx = gy / r - d * ((gy * d).sum(axis=-1, keepdims=True) / (n * r**3))
        ggain = (g * xh).reshape(-1, n).sum(axis=0)
        return gx, ggain

    return _record(out, (x, gain), vjp)


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved coordinate pairs of the last axis.

    ``cos``/``sin`` have last extent x.shape[-1] // 2 and broadcast over the
    rest; they are treated as constants (position tables).
    """
    if x.shape[-1] % 2:
        raise ShapeError(f"rope needs an even last axis, got {x.shape}")
    d = x.data
    xe, xo = d[..., 0::2], d[..., 1::2]
    out_d = np.empty_like(d)
    out_d[..., 0::2] = xe * cos - xo * sin
    out_d[..., 1::2] = xe * sin + xo * cos
    out = Tensor(out_d)

    def vjp(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return _record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# top-k (selection only; not differentiable)
# ---------------------------------------------------------------------------


def topk_indices(x, k: int, axis: int = -1, mask=None) -> np.ndarray:
    """Indices of the k largest entries, ties broken by lowest index.

    Entries that are masked out or non-finite never qualify; if fewer than
    k remain, all of them are returned. For >1-D input every slice must
    keep the same number of valid entries (the result stays rectangular).
    """
    if k < 1:
        raise ShapeError("topk requires k >= 1")
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    arr = np.moveaxis(arr, axis, -1)
    valid = np.isfinite(arr)
    if mask is not None:
        valid &= np.broadcast_to(np.asarray(mask, dtype=bool), arr.shape)
    keyed = np.where(valid, arr, -np.inf)
    order = np.argsort(-keyed, axis=-1, kind="stable")
    counts = valid.sum(axis=-1)
    if arr.ndim > 1 and counts.size and counts.min() != counts.max():
        raise ShapeError("topk on >1-D input needs a uniform valid count per slice")
    take = int(min(k, counts.min() if counts.size else 0))
    out = order[..., :take]
    return np.moveaxis(out, -1, axis) if arr.ndim > 1 else out


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor):
    """Accumulate d(loss)/d(leaf) into each leaf's ``.grad``.

    Returns {leaf: gradient array} for every leaf the loss reaches. A tape
    can be walked once; build a fresh tape per step.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._consumed:
        raise GraphError("tape already consumed; gradient accumulation without reset")
    tape._consumed = True

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    produced = {id(n.out) for n in tape.nodes}

    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        holders.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.vjp(g)
        for inp, gin in zip(node.inputs, grads):
            if gin is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in pending:
                pending[key] = pending[key] + gin
            else:
                pending[key] = gin
                holders[key] = inp

    leaf_grads: dict[Tensor, np.ndarray] = {}
    for key, g in pending.items():
        t = holders[key]
        if id(t) in produced:
            continue  # unreached intermediate
        t.grad = g if t.grad is None else t.grad + g
        leaf_grads[t] = g
    return leaf_grads


def grad_check(f, leaves, eps: float = 1e-5, samples_per_leaf: int = 24, seed: int = 0) -> float:
    """Max relative error between taped gradients and central differences.

    ``f`` recomputes the scalar loss from the current leaf buffers. Leaves
    must be fp64; coordinates are subsampled per leaf when large.
    """
    for leaf in leaves:
        if leaf.dtype != np.float64:
            raise GraphError("grad_check requires fp64 leaves")

    saved = [leaf.grad for leaf in leaves]
    for leaf in leaves:
        leaf.grad = None
    with Tape() as tape:
        loss = f()
    grads = backward(tape, loss)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf in leaves:
        analytic = grads.get(leaf)
        analytic = np.zeros_like(leaf.data) if analytic is None else analytic
        size = leaf.data.size
        if size <= samples_per_leaf:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=samples_per_leaf, replace=False)
        flat = leaf.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = f().item()
            flat[c] = orig - eps
            fm = f().item()
            flat[c] = orig
            cd = (fp - fm) / (2.0 * eps)
            err = abs(aflat[c] - cd) / (abs(aflat[c]) + abs(cd) + 1e-12)
            worst = max(worst, err)
    for leaf, g in zip(leaves, saved):
        leaf.grad = g
    return worst
