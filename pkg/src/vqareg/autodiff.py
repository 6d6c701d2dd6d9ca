"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Define-by-run: while a :class:`Tape` is active, every op whose inputs require
gradients appends a node in execution order, so the record is topologically
sorted by construction. :func:`backward` replays it once, in reverse, and then
marks the tape as consumed. Without an active tape ops run as plain numpy,
which is what the evaluation paths use.

Tensors are treated as immutable after creation; only the optimizer updates
parameter values in place, between tapes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class Tape:
    """Ordered record of ops executed under ``with Tape() as tape:``.

    One backward pass per tape; a second call raises.
    """

    def __init__(self) -> None:
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._nodes)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense float64 array plus an optional accumulated gradient."""

    __slots__ = ("values", "requires_grad", "grad", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def sum(self, axis: int | None = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return tmean(self, axis)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(values: np.ndarray, inputs: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(values, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._nodes.append((out, backward_fn))
        out._tape = tape
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every gradient-requiring tensor behind ``loss``.

    ``loss`` must be a scalar recorded on a still-unconsumed tape.
    """
    tape = loss._tape
    if tape is None:
        raise RuntimeError("backward: loss was not recorded on an active tape")
    if tape.consumed:
        raise RuntimeError("backward: tape already consumed by a previous backward pass")
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape.consumed = True
    loss.grad = np.ones_like(loss.values)
    for out, backward_fn in reversed(tape._nodes):
        if out.grad is not None:
            backward_fn(out.grad)


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    values = a.values + b.values

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(values, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    values = a.values - b.values

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(values, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    values = a.values * b.values

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g * b.values, a.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.shape))

    return _make(values, (a, b), bwd)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    values = a.values * c

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g * c)

    return _make(values, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    values = a.values @ b.values

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g @ b.values.T)
        _accumulate(b, a.values.T @ g)

    return _make(values, (a, b), bwd)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.values)

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g * (1.0 - y * y))

    return _make(y, (x,), bwd)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = sigmoid_array(x.values)

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g * y * (1.0 - y))

    return _make(y, (x,), bwd)


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    """Numerically stable elementwise sigmoid on a plain array."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.values > 0
    values = np.where(mask, x.values, 0.0)

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, np.where(mask, g, 0.0))

    return _make(values, (x,), bwd)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    values = np.concatenate([t.values for t in ts], axis=axis)
    sizes = [t.shape[axis if axis >= 0 else t.ndim + axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g: np.ndarray) -> None:
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _make(values, ts, bwd)


def gather(table, indices) -> Tensor:
    """Row lookup: ``table[indices]`` with scatter-add backward (embeddings)."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    values = table.values[idx]

    def bwd(g: np.ndarray) -> None:
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.values)
            np.add.at(table.grad, idx, g)

    return _make(values, (table,), bwd)


def repeat_rows(x, k: int) -> Tensor:
    """(n, d) -> (n*k, d), each row repeated k times consecutively."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"repeat_rows expects a 2-d tensor, got shape {x.shape}")
    n, d = x.shape
    values = np.repeat(x.values, k, axis=0)

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(n, k, d).sum(axis=1))

    return _make(values, (x,), bwd)


def take_rows(x, indices) -> Tensor:
    """Select rows of a 2-d tensor; backward scatter-adds into the source."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.values)
            np.add.at(x.grad, idx, g)

    return _make(x.values[idx], (x,), bwd)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(old))

    return _make(x.values.reshape(shape), (x,), bwd)


def tsum(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    values = x.values.sum(axis=axis)

    def bwd(g: np.ndarray) -> None:
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape).copy())
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _make(values, (x,), bwd)


def tmean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# fused ops with bespoke gradients


def masked_softmax(scores, mask) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked slots exactly 0.

    Stabilized by max-subtraction over the unmasked entries. Raises if any row
    has no unmasked entry.
    """
    s = as_tensor(scores)
    m = np.asarray(mask, dtype=bool)
    if m.shape != s.shape:
        raise ValueError(f"mask shape {m.shape} does not match scores shape {s.shape}")
    if not m.any(axis=-1).all():
        raise ValueError("masked_softmax: at least one entry per row must be unmasked")
    shifted = np.where(m, s.values, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(m, np.exp(shifted), 0.0)
    alpha = e / e.sum(axis=-1, keepdims=True)

    def bwd(g: np.ndarray) -> None:
        inner = (g * alpha).sum(axis=-1, keepdims=True)
        _accumulate(s, alpha * (g - inner))

    return _make(alpha, (s,), bwd)


def weighted_sum(features, weights) -> Tensor:
    """Attention pooling: sum_k w_k * v_k.

    ``features`` is (K, d) with weights (K,), or batched (B, K, d) with
    weights (B, K).
    """
    v = as_tensor(features)
    w = as_tensor(weights)
    if v.ndim == 2 and w.ndim == 1:
        values = np.einsum("kd,k->d", v.values, w.values)

        def bwd(g: np.ndarray) -> None:
            _accumulate(v, np.einsum("d,k->kd", g, w.values))
            _accumulate(w, np.einsum("kd,d->k", v.values, g))

    elif v.ndim == 3 and w.ndim == 2:
        values = np.einsum("bkd,bk->bd", v.values, w.values)

        def bwd(g: np.ndarray) -> None:
            _accumulate(v, np.einsum("bd,bk->bkd", g, w.values))
            _accumulate(w, np.einsum("bkd,bd->bk", v.values, g))

    else:
        raise ValueError(f"weighted_sum: incompatible shapes {v.shape} and {w.shape}")
    return _make(values, (v, w), bwd)


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross entropy from logits, in the stable form
    max(x, 0) - x*y + log(1 + exp(-|x|)).
    """
    x = as_tensor(logits)
    y = as_tensor(targets)
    if x.shape != y.shape:
        raise ValueError(f"bce_with_logits: shapes {x.shape} and {y.shape} differ")
    xv, yv = x.values, y.values
    values = np.maximum(xv, 0.0) - xv * yv + np.log1p(np.exp(-np.abs(xv)))

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g * (sigmoid_array(xv) - yv))
        _accumulate(y, g * (-xv))

    return _make(values, (x, y), bwd)


def sigmoid_bce_loss(logits, targets) -> Tensor:
    """Summed sigmoid BCE: for a single answer-score vector this is the
    per-instance multi-label loss.
    """
    return tsum(bce_with_logits(logits, targets))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam over a dict of named parameter tensors.

    Raises on non-finite gradients, naming the offending parameter block.
    Parameters with no gradient are left untouched.
    """

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state = {
            name: (np.zeros_like(p.values), np.zeros_like(p.values))
            for name, p in params.items()
        }

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.values)
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
            m, v = self.state[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.values -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
