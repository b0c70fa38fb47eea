"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps an ndarray and remembers how it was produced.
Operations build the graph on the fly; :func:`backward` walks it once in
reverse topological order and accumulates gradients with ``+=`` semantics.

Deliberately small surface: no general broadcasting (scalar-with-tensor
only), no views that alias gradients, float64 by default so that
finite-difference checks are meaningful.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DomainError(ValueError):
    """Numeric-domain violation (log/div on non-positive/zero input)."""


class Tensor:
    """An ndarray plus an optional gradient and a backward rule.

    ``data`` is never mutated by ops after creation; parameter updates go
    through :meth:`assign_` between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=""):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    # ------------------------------------------------------------------
    # plumbing

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def assign_(self, new_data):
        """In-place parameter update; only valid outside a live graph."""
        new_data = np.asarray(new_data, dtype=self.data.dtype)
        if new_data.shape != self.data.shape:
            raise ShapeError(f"assign_ shape {new_data.shape} != {self.data.shape}")
        self.data = new_data

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # ------------------------------------------------------------------
    # operator sugar

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, requires_grad=None):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    if requires_grad is None:
        requires_grad = any(p.requires_grad for p in parents)
    out.requires_grad = requires_grad
    if requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _is_scalar_shaped(t: Tensor) -> bool:
    return t.data.size == 1


def _binary_shapes(a: Tensor, b: Tensor):
    """Allow equal shapes or scalar-with-tensor; reject anything else."""
    if a.shape == b.shape or _is_scalar_shaped(a) or _is_scalar_shaped(b):
        return
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape} (only scalar-with-tensor broadcast allowed)")


def _reduce_to(g, t: Tensor):
    """Collapse a gradient onto a scalar-shaped operand."""
    if g.shape == t.shape:
        return g
    return np.sum(g).reshape(t.shape)


# ----------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)
    data = a.data + b.data

    def backward(g):
        a._accumulate(_reduce_to(g, a) if a.shape != data.shape else g)
        b._accumulate(_reduce_to(g, b) if b.shape != data.shape else g)

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)
    data = a.data - b.data

    def backward(g):
        a._accumulate(_reduce_to(g, a) if a.shape != data.shape else g)
        b._accumulate(-_reduce_to(g, b) if b.shape != data.shape else -g)

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)
    data = a.data * b.data

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        a._accumulate(_reduce_to(ga, a) if a.shape != data.shape else ga)
        b._accumulate(_reduce_to(gb, b) if b.shape != data.shape else gb)

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    data = a.data / b.data

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        a._accumulate(_reduce_to(ga, a) if a.shape != data.shape else ga)
        b._accumulate(_reduce_to(gb, b) if b.shape != data.shape else gb)

    return _make(data, (a, b), backward)


def scale(t, s: float) -> Tensor:
    """Multiply by a python constant (not differentiated w.r.t. s)."""
    t = _as_tensor(t)
    s = float(s)
    data = t.data * s

    def backward(g):
        t._accumulate(g * s)

    return _make(data, (t,), backward)


def exp(t) -> Tensor:
    t = _as_tensor(t)
    data = np.exp(t.data)

    def backward(g):
        t._accumulate(g * data)

    return _make(data, (t,), backward)


def log(t) -> Tensor:
    t = _as_tensor(t)
    if np.any(t.data <= 0.0):
        raise DomainError("log of non-positive value")
    data = np.log(t.data)

    def backward(g):
        t._accumulate(g / t.data)

    return _make(data, (t,), backward)


def sqrt(t) -> Tensor:
    t = _as_tensor(t)
    if np.any(t.data < 0.0):
        raise DomainError("sqrt of negative value")
    data = np.sqrt(t.data)

    def backward(g):
        t._accumulate(g * 0.5 / data)

    return _make(data, (t,), backward)


def tanh(t) -> Tensor:
    t = _as_tensor(t)
    data = np.tanh(t.data)

    def backward(g):
        t._accumulate(g * (1.0 - data * data))

    return _make(data, (t,), backward)


def relu(t) -> Tensor:
    t = _as_tensor(t)
    data = np.maximum(t.data, 0.0)

    def backward(g):
        t._accumulate(g * (t.data > 0.0))

    return _make(data, (t,), backward)


# ----------------------------------------------------------------------
# shape ops


def reshape(t, shape) -> Tensor:
    t = _as_tensor(t)
    data = t.data.reshape(shape)
    old_shape = t.data.shape

    def backward(g):
        t._accumulate(g.reshape(old_shape))

    return _make(data, (t,), backward)


def transpose(t, axes=None) -> Tensor:
    t = _as_tensor(t)
    data = np.transpose(t.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        t._accumulate(np.transpose(g, inv))

    return _make(data, (t,), backward)


def slice_(t, key) -> Tensor:
    """Basic (non-fancy) indexing; backward scatters into a zero buffer."""
    t = _as_tensor(t)
    data = np.asarray(t.data[key])
    if data.base is not None:
        data = data.copy()

    def backward(g):
        buf = np.zeros_like(t.data)
        buf[key] = g
        t._accumulate(buf)

    return _make(data, (t,), backward)


def take_rows(t, indices) -> Tensor:
    """Row gather along axis 0 (embedding lookup); duplicates accumulate."""
    t = _as_tensor(t)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= t.data.shape[0]):
        raise ShapeError(f"row index out of range for axis of length {t.data.shape[0]}")
    data = t.data[idx]

    def backward(g):
        buf = np.zeros_like(t.data)
        np.add.at(buf, idx.reshape(-1), g.reshape(-1, *t.data.shape[1:]) if t.data.ndim > 1 else g.reshape(-1))
        t._accumulate(buf)

    return _make(data, (t,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accumulate(g[tuple(sl)])

    return _make(data, tuple(tensors), backward)


def expand(t, axis, n) -> Tensor:
    """Replicate a singleton axis n times; backward sums it back."""
    t = _as_tensor(t)
    if t.data.shape[axis] != 1:
        raise ShapeError(f"expand requires a singleton axis, got {t.data.shape[axis]} at axis {axis}")
    reps = [1] * t.data.ndim
    reps[axis] = n
    data = np.tile(t.data, reps)

    def backward(g):
        t._accumulate(np.sum(g, axis=axis, keepdims=True))

    return _make(data, (t,), backward)


# ----------------------------------------------------------------------
# matmul and reductions


def matmul(a, b) -> Tensor:
    """Matrix product; stacked (>2-d) operands need identical batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-d")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"batch dimensions disagree: {a.data.shape} x {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(data, (a, b), backward)


def _check_axis(t: Tensor, axis):
    if axis is None:
        return
    if not -t.data.ndim <= axis < t.data.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {t.data.shape}")


def sum_(t, axis=None, keepdims=False) -> Tensor:
    t = _as_tensor(t)
    _check_axis(t, axis)
    data = np.sum(t.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            t._accumulate(np.full_like(t.data, 1.0) * g)
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            t._accumulate(np.broadcast_to(g, t.data.shape).copy())

    return _make(data, (t,), backward)


def mean(t, axis=None, keepdims=False) -> Tensor:
    t = _as_tensor(t)
    _check_axis(t, axis)
    data = np.mean(t.data, axis=axis, keepdims=keepdims)
    count = t.data.size if axis is None else t.data.shape[axis]

    def backward(g):
        if axis is None:
            t._accumulate(np.full_like(t.data, g / count))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            t._accumulate(np.broadcast_to(g / count, t.data.shape).copy())

    return _make(data, (t,), backward)


def max_(t, axis=None, keepdims=False) -> Tensor:
    """Max reduction; gradient routes to the (first) argmax position."""
    t = _as_tensor(t)
    _check_axis(t, axis)
    data = np.max(t.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            buf = np.zeros_like(t.data)
            flat_idx = np.argmax(t.data)
            buf.reshape(-1)[flat_idx] = g
            t._accumulate(buf)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            idx = np.argmax(t.data, axis=axis)
            buf = np.zeros_like(t.data)
            np.put_along_axis(buf, np.expand_dims(idx, axis), gg, axis)
            t._accumulate(buf)

    return _make(data, (t,), backward)


def softmax(t, axis=-1) -> Tensor:
    """Numerically stable softmax with the standard fused backward rule."""
    t = _as_tensor(t)
    shifted = t.data - np.max(t.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * data, axis=axis, keepdims=True)
        t._accumulate(data * (g - dot))

    return _make(data, (t,), backward)


# ----------------------------------------------------------------------
# losses


def softmax_cross_entropy_row(logits, positive_index: int) -> Tensor:
    """-log softmax(logits)[positive_index] for a 1-d logits vector.

    Max-subtraction keeps exp() in range; the backward rule is the exact
    softmax-minus-onehot form.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 1 or logits.data.size < 1:
        raise ShapeError(f"expected non-empty 1-d logits, got shape {logits.data.shape}")
    n = logits.data.size
    if not 0 <= positive_index < n:
        raise ShapeError(f"positive_index {positive_index} out of range [0, {n})")
    shifted = logits.data - np.max(logits.data)
    logsumexp = np.log(np.sum(np.exp(shifted)))
    data = np.asarray(logsumexp - shifted[positive_index])
    probs = np.exp(shifted - logsumexp)

    def backward(g):
        grad = probs.copy()
        grad[positive_index] -= 1.0
        logits._accumulate(g * grad)

    return _make(data, (logits,), backward)


def softmax_cross_entropy_rows(logits, positive_indices) -> Tensor:
    """Row-wise -log softmax(logits)[i, positive_indices[i]]; returns a vector."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"expected 2-d logits, got shape {logits.data.shape}")
    rows, n = logits.data.shape
    idx = np.asarray(positive_indices, dtype=np.int64)
    if idx.shape != (rows,):
        raise ShapeError(f"positive_indices shape {idx.shape} != ({rows},)")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError("positive index out of range")
    shifted = logits.data - np.max(logits.data, axis=1, keepdims=True)
    logsumexp = np.log(np.sum(np.exp(shifted), axis=1))
    data = logsumexp - shifted[np.arange(rows), idx]
    probs = np.exp(shifted - logsumexp[:, None])

    def backward(g):
        grad = probs.copy()
        grad[np.arange(rows), idx] -= 1.0
        logits._accumulate(g[:, None] * grad)

    return _make(data, (logits,), backward)


# ----------------------------------------------------------------------
# backward driver


class GraphError(RuntimeError):
    """backward() called on something that is not a scalar loss."""


def backward(loss: Tensor):
    """Populate .grad on every requires_grad tensor reachable from loss.

    Repeated calls accumulate; callers zero grads between steps.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    # Interior nodes propagate only this call's gradient; stashing their old
    # grads keeps repeated backward() calls from compounding through them
    # while still accumulating (+=) everywhere, leaves included.
    interior = [n for n in topo if n._backward is not None]
    stashed = [(n, n.grad) for n in interior]
    for n in interior:
        n.grad = None

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    for node, old in stashed:
        if old is not None:
            node.grad = old if node.grad is None else node.grad + old
