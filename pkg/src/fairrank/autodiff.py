"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Ops executed while a :class:`Tape` is active, and that touch at least one
node requiring gradients, are appended to that tape.  ``tape.backward(loss)``
then walks the tape in reverse execution order, so every recorded op has its
backward rule called exactly once.  Outside any tape the same functions just
compute values, which is what evaluation code relies on.

Broadcasting follows numpy; backward rules sum gradients back down to the
operand shape.
"""
from __future__ import annotations

import threading

import numpy as np
from scipy import sparse

from .errors import ContractError, DimensionError

LOG_CLAMP = 1e-12

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node:
    """A value in the computation graph plus its accumulated gradient."""

    __slots__ = ("value", "_grad", "op", "parents", "_backward", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None, op="leaf", parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad = None
        self.op = op
        self.parents = parents
        self._backward = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self):
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def _accumulate(self, g):
        # never mutate in place: backward rules may hand the same array to several parents
        if self._grad is None:
            self._grad = np.asarray(g, dtype=np.float64).reshape(self.value.shape)
        else:
            self._grad = self._grad + g

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Node{label}(op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise ContractError("division by a Node is not supported")
        return scale(self, 1.0 / float(other))


def parameter(value, name=None):
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def constant(value):
    return value if isinstance(value, Node) else Node(value)


class Tape:
    """Ordered record of the ops executed during one forward pass.

    Use as a context manager.  ``backward`` may be called once; pass
    ``accumulate=True`` to run it again and add into leaf gradients.
    """

    def __init__(self):
        self.nodes = []
        self._ran = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse of nested tapes
            stack.remove(self)
        return False

    def record(self, node):
        self.nodes.append(node)

    def backward(self, loss, accumulate=False):
        if not isinstance(loss, Node) or loss.value.size != 1:
            shape = loss.shape if isinstance(loss, Node) else type(loss)
            raise ContractError(f"backward needs a scalar loss, got shape {shape}")
        if self._ran and not accumulate:
            raise ContractError(
                "backward already ran on this tape; pass accumulate=True to add into leaf grads"
            )
        for node in self.nodes:
            node._grad = None
        if not loss.requires_grad:
            self._ran = True
            return
        loss._accumulate(np.ones_like(loss.value))
        for node in reversed(self.nodes):
            if node._grad is not None:
                node._backward(node._grad)
        self._ran = True


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _result(value, op, parents, backward):
    tape = current_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    node = Node(value, requires_grad=track, op=op, parents=parents if track else ())
    if track:
        node._backward = backward
        tape.record(node)
    return node


def _send(node, g):
    if node.requires_grad:
        node._accumulate(g)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = constant(a), constant(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        _send(a, _unbroadcast(g, a.shape))
        _send(b, _unbroadcast(g, b.shape))

    return _result(a.value + b.value, "add", (a, b), backward)


def sub(a, b):
    a, b = constant(a), constant(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        _send(a, _unbroadcast(g, a.shape))
        _send(b, _unbroadcast(-g, b.shape))

    return _result(a.value - b.value, "sub", (a, b), backward)


def mul(a, b):
    a, b = constant(a), constant(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return _result(a.value * b.value, "mul", (a, b), backward)


def scale(x, c):
    x = constant(x)
    c = float(c)

    def backward(g):
        _send(x, g * c)

    return _result(x.value * c, "scale", (x,), backward)


def tanh(x):
    x = constant(x)
    y = np.tanh(x.value)

    def backward(g):
        _send(x, g * (1.0 - y * y))

    return _result(y, "tanh", (x,), backward)


def relu(x):
    x = constant(x)
    on = x.value > 0

    def backward(g):
        _send(x, g * on)

    return _result(np.where(on, x.value, 0.0), "relu", (x,), backward)


def exp(x):
    x = constant(x)
    y = np.exp(x.value)

    def backward(g):
        _send(x, g * y)

    return _result(y, "exp", (x,), backward)


def log(x, clamp=LOG_CLAMP):
    """Natural log of ``max(x, clamp)``; no gradient where the clamp is active."""
    x = constant(x)
    safe = np.maximum(x.value, clamp)
    live = x.value > clamp

    def backward(g):
        _send(x, np.where(live, g / safe, 0.0))

    return _result(np.log(safe), "log", (x,), backward)


def grad_reverse(x, lam):
    """Identity on the forward pass; multiplies the upstream gradient by ``-lam``."""
    if lam < 0:
        raise ContractError(f"grad_reverse: lambda must be >= 0, got {lam}")
    x = constant(x)
    lam = float(lam)

    def backward(g):
        _send(x, g * -lam)

    return _result(x.value.copy(), "grad_reverse", (x,), backward)


def detach(x):
    return Node(constant(x).value.copy())


# ----------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    x = constant(x)
    y = x.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _send(x, np.broadcast_to(g, x.shape))

    return _result(y, "sum", (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = constant(x)
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def dot(a, b):
    """Inner product over the last axis; operand shapes must match exactly."""
    a, b = constant(a), constant(b)
    if a.shape != b.shape:
        raise DimensionError("dot", a.shape, b.shape)
    return sum(mul(a, b), axis=-1)


def logsumexp(x, axis=-1):
    x = constant(x)
    m = x.value.max(axis=axis, keepdims=True)
    shifted = np.exp(x.value - m)
    total = shifted.sum(axis=axis, keepdims=True)
    y = np.squeeze(m + np.log(total), axis=axis)
    soft = shifted / total

    def backward(g):
        _send(x, np.expand_dims(g, axis) * soft)

    return _result(y, "logsumexp", (x,), backward)


def softmax(x, axis=-1, mask=None):
    """Numerically stable softmax; masked-out positions get exactly zero.

    A slice with no unmasked entries yields all zeros.
    """
    x = constant(x)
    v = x.value
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        v = np.where(mask, v, -np.inf)
    m = v.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(v - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    total = e.sum(axis=axis, keepdims=True)
    y = e / np.where(total > 0, total, 1.0)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _send(x, y * (g - inner))

    return _result(y, "softmax", (x,), backward)


# ------------------------------------------------------------------ structure

def matmul(a, b):
    """Matrix product with numpy batch semantics; both operands need ndim >= 2."""
    a, b = constant(a), constant(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    try:
        y = np.matmul(a.value, b.value)
    except ValueError:
        raise DimensionError("matmul", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape))

    return _result(y, "matmul", (a, b), backward)


def transpose(x):
    """Swap the last two axes."""
    x = constant(x)

    def backward(g):
        _send(x, np.swapaxes(g, -1, -2))

    return _result(np.swapaxes(x.value, -1, -2), "transpose", (x,), backward)


def reshape(x, shape):
    x = constant(x)
    try:
        y = x.value.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", x.shape, shape) from None

    def backward(g):
        _send(x, g.reshape(x.shape))

    return _result(y, "reshape", (x,), backward)


def concat(nodes, axis=-1):
    nodes = [constant(n) for n in nodes]
    try:
        y = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise DimensionError("concat", *(n.shape for n in nodes)) from None
    ax = axis % y.ndim
    bounds = np.cumsum([n.shape[ax] for n in nodes])[:-1]

    def backward(g):
        for n, piece in zip(nodes, np.split(g, bounds, axis=ax)):
            _send(n, piece)

    return _result(y, "concat", tuple(nodes), backward)


def take(x, indices, axis=0):
    """Gather rows (embedding lookup); gradients scatter-add back."""
    x = constant(x)
    idx = np.asarray(indices, dtype=np.int64)
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise DimensionError("take", x.shape, idx.shape)
    y = np.take(x.value, idx, axis=axis)

    def backward(g):
        if not x.requires_grad:
            return
        if axis == 0:
            flat = np.where(idx < 0, idx + n, idx).ravel()
            x._accumulate(_scatter_rows(flat, g.reshape(idx.size, -1), n).reshape(x.shape))
            return
        full = np.zeros_like(x.value)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        x._accumulate(full)

    return _result(y, "take", (x,), backward)


def bag(x, indices, weights):
    """Weighted sum of gathered rows: ``y[i] = sum_j weights[i, j] * x[indices[i, j]]``.

    Same result as ``sum(take(x, indices) * weights[..., None], axis=1)`` as a
    single tape node, which keeps embedding-bag lookups cheap.
    """
    x = constant(x)
    idx = np.asarray(indices, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    n = x.shape[0]
    if idx.ndim != 2 or w.shape != idx.shape or x.value.ndim != 2:
        raise DimensionError("bag", x.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError("bag", x.shape, idx.shape)
    rows, width = idx.shape
    m = sparse.csr_matrix((w.ravel(), idx.ravel(), np.arange(0, rows * width + 1, width)),
                          shape=(rows, n))
    y = np.asarray(m @ x.value)

    def backward(g):
        _send(x, np.asarray(m.T @ g))

    return _result(y, "bag", (x,), backward)


def _scatter_rows(idx, rows, n):
    """Sum ``rows[i]`` into output row ``idx[i]`` (a faster ``np.add.at``)."""
    m = sparse.csc_matrix((np.ones(idx.size), idx, np.arange(idx.size + 1)), shape=(n, idx.size))
    return np.asarray(m @ rows)


def pick(x, labels):
    """Select ``x[i, labels[i]]`` for each row of a 2-D node."""
    x = constant(x)
    labels = np.asarray(labels, dtype=np.int64)
    if x.value.ndim != 2 or labels.shape != (x.shape[0],):
        raise DimensionError("pick", x.shape, labels.shape)
    rows = np.arange(x.shape[0])

    def backward(g):
        full = np.zeros_like(x.value)
        full[rows, labels] = g
        _send(x, full)

    return _result(x.value[rows, labels], "pick", (x,), backward)


def select(x, index, axis):
    """Basic integer index along one axis (drops that axis)."""
    x = constant(x)
    key = [slice(None)] * x.value.ndim
    key[axis] = index
    key = tuple(key)

    def backward(g):
        full = np.zeros_like(x.value)
        full[key] = g
        _send(x, full)

    return _result(x.value[key], "select", (x,), backward)


# -------------------------------------------------------------------- losses

def cross_entropy(probs, labels):
    """Per-row ``-log p[label]`` with the probability clamped at 1e-12."""
    return scale(log(pick(probs, labels)), -1.0)


def kl_divergence(p, q, axis=-1):
    """Per-row ``sum p * (log p - log q)``, both operands clamped below at 1e-12."""
    return sum(mul(p, sub(log(p), log(q))), axis=axis)


# ---------------------------------------------------------------------- adam

class AdamState:
    """First/second moment estimates keyed by parameter name, plus step count."""

    def __init__(self):
        self.step = 0
        self.m = {}
        self.v = {}

    def to_arrays(self):
        out = {"__step__": np.array(self.step)}
        for k in self.m:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out


def adam_step(params, grads, state, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update, applied in place.

    ``params`` and ``grads`` map names to arrays of identical shapes.  Returns
    ``(params, state)`` for convenience.
    """
    if state.step < 0:
        raise ContractError(f"adam_step: negative step counter {state.step}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"adam_step: grad for {name} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ContractError(f"adam_step: moment for {name} has shape {m.shape}, param {p.shape}")
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state
