"""Dense float64 tensors with reverse-mode automatic differentiation.

Small and CPU-only by design: enough operator coverage to train and adapt a
small causal transformer. Every operation records its inputs and a backward
closure on the produced tensor; `backward()` replays the recorded nodes in
reverse creation order, which visits each node exactly once.
"""

from __future__ import annotations

import itertools
import math
import threading

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that suspends graph recording on the current thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    `requires_grad` marks leaves (parameters). Tensors produced by operations
    carry parent references and a backward closure while grad recording is
    enabled; under `no_grad()` they are plain values.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_order")

    _counter = itertools.count()

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._order = next(Tensor._counter)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # Convenience arithmetic used by tests and small models.
    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _wants_grad(*tensors: Tensor) -> bool:
    return grad_enabled() and any(t.requires_grad or t._backward is not None or t._parents for t in tensors)


def _make(data, parents, backward) -> Tensor:
    if parents is None:
        return Tensor(data)
    out = Tensor(data, _parents=parents, _backward=backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ValueError(f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None
    if not _wants_grad(a, b):
        return Tensor(data)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None
    if not _wants_grad(a, b):
        return Tensor(data)

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * s
    if not _wants_grad(a):
        return Tensor(data)

    def backward(g):
        a._accumulate(g * s)

    return _make(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul: expected 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul: inner dimensions disagree, {a.data.shape} x {b.data.shape}"
        )
    data = a.data @ b.data
    if not _wants_grad(a, b):
        return Tensor(data)

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose: expected a 2-D tensor, got shape {a.data.shape}")
    data = a.data.T.copy()
    if not _wants_grad(a):
        return Tensor(data)

    def backward(g):
        a._accumulate(g.T)

    return _make(data, (a,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids of shape (T,) into a (V, D) table, producing (T, D)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError(f"embedding: ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError("embedding: id out of range for table")
    data = table.data[ids]
    if not _wants_grad(table):
        return Tensor(data)

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return _make(data, (table,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an affine gain and bias."""
    if x.data.shape[-1] != gain.data.shape[-1] or x.data.shape[-1] != bias.data.shape[-1]:
        raise ValueError(
            f"layer_norm: feature dim {x.data.shape[-1]} does not match "
            f"gain {gain.data.shape} / bias {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data
    if not _wants_grad(x, gain, bias):
        return Tensor(data)

    def backward(g):
        gain._accumulate(_unbroadcast(g * xhat, gain.data.shape))
        bias._accumulate(_unbroadcast(g, bias.data.shape))
        gg = g * gain.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        x._accumulate((gg - m1 - xhat * m2) * inv)

    return _make(data, (x, gain, bias), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis. Rows may contain -inf entries (masking)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    if not _wants_grad(x):
        return Tensor(p)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        x._accumulate(p * (g - inner))

    return _make(p, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * phi
    if not _wants_grad(x):
        return Tensor(data)

    def backward(g):
        dens = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        x._accumulate(g * (phi + x.data * dens))

    return _make(data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)
    if not _wants_grad(x):
        return Tensor(data)

    def backward(g):
        x._accumulate(g * (x.data > 0.0))

    return _make(data, (x,), backward)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ValueError("concat: need at least one tensor")
    data = np.concatenate([p.data for p in parts], axis=axis)
    if not _wants_grad(*parts):
        return Tensor(data)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            p._accumulate(piece)

    return _make(data, tuple(parts), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along one axis."""
    key = [slice(None)] * x.data.ndim
    key[axis] = slice(start, stop)
    key = tuple(key)
    data = x.data[key].copy()
    if not _wants_grad(x):
        return Tensor(data)

    def backward(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[key] += g

    return _make(data, (x,), backward)


def tsum(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum())
    if not _wants_grad(x):
        return Tensor(data)

    def backward(g):
        x._accumulate(np.full_like(x.data, float(g)))

    return _make(data, (x,), backward)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    data = np.asarray(x.data.sum() / n)
    if not _wants_grad(x):
        return Tensor(data)

    def backward(g):
        x._accumulate(np.full_like(x.data, float(g) / n))

    return _make(data, (x,), backward)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Stable log-softmax over the last axis of a plain array."""
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def masked_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of `targets` at the masked positions.

    `logits` has shape (T, V); `targets` and `mask` have shape (T,). Only the
    positions where `mask` is true contribute to the loss and to gradients.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.data.ndim != 2:
        raise ValueError(f"masked_cross_entropy: logits must be (T, V), got {logits.data.shape}")
    T, V = logits.data.shape
    if targets.shape != (T,) or mask.shape != (T,):
        raise ValueError(
            f"masked_cross_entropy: targets {targets.shape} and mask {mask.shape} "
            f"must both have shape ({T},)"
        )
    n_masked = int(mask.sum())
    if n_masked == 0:
        raise ValueError("masked_cross_entropy: mask selects no positions")
    if targets[mask].min() < 0 or targets[mask].max() >= V:
        raise ValueError("masked_cross_entropy: target id out of range")

    logp = log_softmax_rows(logits.data)
    picked = logp[np.arange(T), targets]
    data = np.asarray(-picked[mask].sum() / n_masked)
    if not _wants_grad(logits):
        return Tensor(data)

    def backward(g):
        p = np.exp(logp)
        d = p.copy()
        d[np.arange(T), targets] -= 1.0
        d[~mask] = 0.0
        logits._accumulate(d * (float(g) / n_masked))

    return _make(data, (logits,), backward)


def backward(loss: Tensor) -> None:
    """Populate gradients of every reachable `requires_grad` tensor.

    Repeated calls accumulate additively into existing grad buffers.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.data.shape}")
    if loss._backward is None and not loss._parents:
        raise ValueError("backward: loss has no recorded computation graph")

    # Reverse creation order is a valid reverse-topological order because an
    # operation's output is always created after its inputs.
    seen = {id(loss)}
    stack = [loss]
    nodes = []
    while stack:
        t = stack.pop()
        nodes.append(t)
        for p in t._parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    nodes.sort(key=lambda t: t._order, reverse=True)

    loss._accumulate(np.ones_like(loss.data))
    for t in nodes:
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
    # Intermediate grads are pass-local; only requires_grad leaves keep theirs,
    # so a second backward() through the same graph accumulates additively.
    for t in nodes:
        if not t.requires_grad:
            t.grad = None


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Rescale `grads` in place so their joint L2 norm is at most `max_norm`.

    Returns the factor that was applied (1.0 when no rescaling happened).
    """
    if max_norm < 0:
        raise ValueError("clip_global_norm: max_norm must be nonnegative")
    total = 0.0
    for g in grads:
        total += float(np.square(g).sum())
    if not math.isfinite(total):
        raise FloatingPointError("clip_global_norm: non-finite gradient values")
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for g in grads:
        g *= factor
    return factor
