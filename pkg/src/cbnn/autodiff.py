"""Reverse-mode automatic differentiation over small dense tensors.

A ``Tensor`` wraps a float64 numpy array. Operations on tensors record a
backward closure when any input requires gradients, forming a DAG (the
tape). ``backward(root)`` walks the tape in reverse topological order and
returns the gradient of the scalar ``root`` with respect to every
reachable leaf that requires gradients.

Subgradient conventions at kinks are deterministic and chosen so that a
satisfied hinge contributes no gradient:

    d/dx min(x, c) = 1 for x < c, 0 for x >= c
    d/dx max(x, c) = 1 for x > c, 0 for x <= c
    d/dx |x|       = sign(x), 0 at x = 0
    relu, clamp follow the min/max rules above

The tape is single-threaded during construction and backward; tensors are
value-semantic and may be shared read-only between threads.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Operand values lie outside the operation's domain (log, div)."""


class ContractError(ValueError):
    """An operation precondition was violated (e.g. non-scalar backward root)."""


class Tensor:
    """Dense float64 array with optional gradient tracking.

    Leaf tensors reject NaN/Inf at construction. Interior nodes are
    produced by the op functions below and carry a backward closure.
    """

    __slots__ = ("value", "requires_grad", "grad", "_parents", "_vjp", "_needs", "op")

    def __init__(self, value, requires_grad=False):
        arr = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("leaf tensor values must be finite")
        self.value = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._needs = self.requires_grad
        self.op = "leaf"

    @classmethod
    def _node(cls, value, parents, op, vjp):
        t = cls.__new__(cls)
        t.value = np.asarray(value, dtype=np.float64)
        t.requires_grad = False
        t.grad = None
        t._parents = parents
        t._vjp = vjp
        t._needs = True
        t.op = op
        return t

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def item(self):
        if self.value.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.value.reshape(())[()])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor({self.value!r}, op={self.op!r})"

    # operator sugar; plain numbers/arrays become no-grad constants
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracing(*tensors):
    return any(t._needs for t in tensors)


def _unbroadcast(grad, shape):
    """Sum `grad` over the axes numpy broadcasting expanded from `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_value(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from e


# ---------------------------------------------------------------------------
# kink monitoring (used by gradcheck to certify "away from kinks")

class KinkRecord:
    __slots__ = ("min_distance",)

    def __init__(self):
        self.min_distance = np.inf


_KINK_WATCH = None


@contextmanager
def watch_kinks():
    """Record the smallest |input - kink| seen by any piecewise op in the block."""
    global _KINK_WATCH
    prev = _KINK_WATCH
    rec = KinkRecord()
    _KINK_WATCH = rec
    try:
        yield rec
    finally:
        _KINK_WATCH = prev


def _note_kinks(distances):
    if _KINK_WATCH is not None and distances.size:
        d = float(np.min(distances))
        if d < _KINK_WATCH.min_distance:
            _KINK_WATCH.min_distance = d


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_value(a.value, b.value, "add")
    val = a.value + b.value
    if not _tracing(a, b):
        return Tensor(val)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a._needs else None,
                _unbroadcast(g, b.shape) if b._needs else None)

    return Tensor._node(val, (a, b), "add", vjp)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_value(a.value, b.value, "sub")
    val = a.value - b.value
    if not _tracing(a, b):
        return Tensor(val)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a._needs else None,
                _unbroadcast(-g, b.shape) if b._needs else None)

    return Tensor._node(val, (a, b), "sub", vjp)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_value(a.value, b.value, "mul")
    val = a.value * b.value
    if not _tracing(a, b):
        return Tensor(val)

    def vjp(g):
        return (_unbroadcast(g * b.value, a.shape) if a._needs else None,
                _unbroadcast(g * a.value, b.shape) if b._needs else None)

    return Tensor._node(val, (a, b), "mul", vjp)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_value(a.value, b.value, "div")
    if np.any(b.value == 0.0):
        raise DomainError("div: zero divisor")
    val = a.value / b.value
    if not _tracing(a, b):
        return Tensor(val)

    def vjp(g):
        ga = _unbroadcast(g / b.value, a.shape) if a._needs else None
        gb = _unbroadcast(-g * a.value / (b.value * b.value), b.shape) if b._needs else None
        return (ga, gb)

    return Tensor._node(val, (a, b), "div", vjp)


def neg(a):
    a = _wrap(a)
    if not a._needs:
        return Tensor(-a.value)

    def vjp(g):
        return (-g,)

    return Tensor._node(-a.value, (a,), "neg", vjp)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise DimensionError("matmul: operands must be 2-D")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims {a.shape} @ {b.shape} mismatch")
    val = a.value @ b.value
    if not _tracing(a, b):
        return Tensor(val)

    def vjp(g):
        ga = g @ b.value.T if a._needs else None
        gb = a.value.T @ g if b._needs else None
        return (ga, gb)

    return Tensor._node(val, (a, b), "matmul", vjp)


# ---------------------------------------------------------------------------
# reductions

def tsum(a):
    a = _wrap(a)
    val = a.value.sum()
    if not a._needs:
        return Tensor(val)

    def vjp(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._node(val, (a,), "sum", vjp)


def tmean(a):
    a = _wrap(a)
    if a.size == 0:
        raise DimensionError("mean of empty tensor")
    val = a.value.mean()
    if not a._needs:
        return Tensor(val)
    n = a.size

    def vjp(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return Tensor._node(val, (a,), "mean", vjp)


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def exp(a):
    a = _wrap(a)
    val = np.exp(a.value)
    if not a._needs:
        return Tensor(val)

    def vjp(g):
        return (g * val,)

    return Tensor._node(val, (a,), "exp", vjp)


def log(a):
    a = _wrap(a)
    if np.any(a.value <= 0.0):
        raise DomainError("log: non-positive argument")
    val = np.log(a.value)
    if not a._needs:
        return Tensor(val)

    def vjp(g):
        return (g / a.value,)

    return Tensor._node(val, (a,), "log", vjp)


def square(a):
    a = _wrap(a)
    val = a.value * a.value
    if not a._needs:
        return Tensor(val)

    def vjp(g):
        return (2.0 * a.value * g,)

    return Tensor._node(val, (a,), "square", vjp)


def tabs(a):
    a = _wrap(a)
    _note_kinks(np.abs(a.value))
    val = np.abs(a.value)
    if not a._needs:
        return Tensor(val)
    sign = np.sign(a.value)

    def vjp(g):
        return (g * sign,)

    return Tensor._node(val, (a,), "abs", vjp)


def relu(a):
    a = _wrap(a)
    _note_kinks(np.abs(a.value))
    val = np.maximum(a.value, 0.0)
    if not a._needs:
        return Tensor(val)
    mask = (a.value > 0.0).astype(np.float64)

    def vjp(g):
        return (g * mask,)

    return Tensor._node(val, (a,), "relu", vjp)


def rbf_activation(a, mu=0.0, sigma=1.0):
    """Gaussian bump unit: exp(-(x - mu)^2 / sigma^2), mu/sigma fixed per unit."""
    a = _wrap(a)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise DomainError("rbf_activation: sigma must be positive")
    z = (a.value - mu) / sigma
    val = np.exp(-z * z)
    if not a._needs:
        return Tensor(val)
    local = -2.0 * z / sigma * val

    def vjp(g):
        return (_unbroadcast(g * local, a.shape),)

    return Tensor._node(val, (a,), "rbf_activation", vjp)


def min_const(a, c):
    a = _wrap(a)
    c = float(c)
    _note_kinks(np.abs(a.value - c))
    val = np.minimum(a.value, c)
    if not a._needs:
        return Tensor(val)
    mask = (a.value < c).astype(np.float64)

    def vjp(g):
        return (g * mask,)

    return Tensor._node(val, (a,), "min_const", vjp)


def max_const(a, c):
    a = _wrap(a)
    c = float(c)
    _note_kinks(np.abs(a.value - c))
    val = np.maximum(a.value, c)
    if not a._needs:
        return Tensor(val)
    mask = (a.value > c).astype(np.float64)

    def vjp(g):
        return (g * mask,)

    return Tensor._node(val, (a,), "max_const", vjp)


def clamp(a, lo, hi):
    a = _wrap(a)
    lo, hi = float(lo), float(hi)
    if lo > hi:
        raise ContractError("clamp: lo > hi")
    _note_kinks(np.minimum(np.abs(a.value - lo), np.abs(a.value - hi)))
    val = np.clip(a.value, lo, hi)
    if not a._needs:
        return Tensor(val)
    mask = ((a.value > lo) & (a.value < hi)).astype(np.float64)

    def vjp(g):
        return (g * mask,)

    return Tensor._node(val, (a,), "clamp", vjp)


# ---------------------------------------------------------------------------
# generic dispatch

_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "sum": tsum,
    "mean": tmean,
    "neg": neg,
    "exp": exp,
    "log": log,
    "square": square,
    "abs": tabs,
    "relu": relu,
    "rbf_activation": rbf_activation,
    "min_const": min_const,
    "max_const": max_const,
    "clamp": clamp,
}


def apply_op(kind, *inputs, **params):
    """Apply a named tape operation. Unknown kinds raise ContractError."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **params)


def op_kinds():
    return sorted(_OPS)


# ---------------------------------------------------------------------------
# backward pass

def _topo_order(root):
    """Parents-before-children ordering of the needy subgraph under root."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._needs and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(leaf) for every reachable requires-grad leaf.

    Returns a dict mapping each such leaf Tensor to its gradient array.
    The gradient is also accumulated into ``leaf.grad``; zero the grads
    between steps to avoid mixing.
    """
    if not isinstance(root, Tensor):
        raise ContractError("backward root must be a Tensor")
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if not root._needs:
        return {}

    grads = {id(root): np.ones_like(root.value)}
    leaf_grads = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.value)
                node.grad = node.grad + g
                leaf_grads[node] = g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent._needs:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return leaf_grads


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()
