"""Small reverse-mode autodiff over numpy arrays.

Every op accepts plain arrays or :class:`Var` handles. When no operand is a
``Var`` the op returns a plain ``ndarray`` and nothing is recorded, so model
code written against these ops runs unchanged for inference and training.

Nodes are appended to a :class:`Tape` in creation order, which is a
topological order; :func:`grad` walks the tape backwards once.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import ContractError, DimensionError

GELU_C = math.sqrt(2.0 / math.pi)


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []

    def var(self, value) -> "Var":
        return self._record(np.array(value, dtype=np.float64), ())

    def _record(self, value, edges) -> "Var":
        node = Var(value, self, len(self.nodes), edges)
        self.nodes.append(node)
        return node


class Var:
    __slots__ = ("value", "tape", "index", "edges")
    __array_priority__ = 100.0

    def __init__(self, value, tape, index, edges):
        self.value = value
        self.tape = tape
        self.index = index
        self.edges = edges

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __pow__(self, p):
        return power(self, p)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"


def value(x):
    return x.value if isinstance(x, Var) else x


def is_var(x) -> bool:
    return isinstance(x, Var)


def _make(out, inputs, vjps):
    tape = None
    edges = []
    for x, fn in zip(inputs, vjps):
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands recorded on different tapes")
            edges.append((x, fn))
    if tape is None:
        return out
    return tape._record(out, tuple(edges))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# elementwise arithmetic -----------------------------------------------------

def add(a, b):
    va, vb = value(a), value(b)
    sa, sb = np.shape(va), np.shape(vb)
    return _make(va + vb, (a, b), (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)))


def sub(a, b):
    va, vb = value(a), value(b)
    sa, sb = np.shape(va), np.shape(vb)
    return _make(va - vb, (a, b), (lambda g: _unbroadcast(g, sa), lambda g: -_unbroadcast(g, sb)))


def mul(a, b):
    va, vb = value(a), value(b)
    sa, sb = np.shape(va), np.shape(vb)
    return _make(
        va * vb, (a, b),
        (lambda g: _unbroadcast(g * vb, sa), lambda g: _unbroadcast(g * va, sb)),
    )


def div(a, b):
    va, vb = value(a), value(b)
    sa, sb = np.shape(va), np.shape(vb)
    out = va / vb
    return _make(
        out, (a, b),
        (lambda g: _unbroadcast(g / vb, sa), lambda g: _unbroadcast(-g * out / vb, sb)),
    )


def neg(a):
    return _make(-value(a), (a,), (lambda g: -g,))


def power(a, p: float):
    va = value(a)
    return _make(va ** p, (a,), (lambda g: g * p * va ** (p - 1),))


def exp(a):
    out = np.exp(value(a))
    return _make(out, (a,), (lambda g: g * out,))


def log(a):
    va = value(a)
    return _make(np.log(va), (a,), (lambda g: g / va,))


def tanh(a):
    out = np.tanh(value(a))
    return _make(out, (a,), (lambda g: g * (1.0 - out * out),))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-value(a)))
    return _make(out, (a,), (lambda g: g * out * (1.0 - out),))


def gelu(a):
    """tanh-approximated GELU."""
    x = value(a)
    inner = GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)

    return _make(out, (a,), (vjp,))


# linear algebra ----------------------------------------------------------------

def matmul(a, b):
    va, vb = value(a), value(b)
    if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {va.shape} x {vb.shape}")
    return _make(va @ vb, (a, b), (lambda g: g @ vb.T, lambda g: va.T @ g))


def transpose(a):
    return _make(value(a).T, (a,), (lambda g: g.T,))


def take_rows(table, idx):
    """``table[idx]`` for an integer index vector; gradient scatters back."""
    vt = value(table)
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(vt)
        np.add.at(out, idx, g)
        return out

    return _make(vt[idx], (table,), (vjp,))


def take(a, rows=None, cols=None):
    """Row/column sub-selection with index arrays."""
    va = value(a)
    r = slice(None) if rows is None else np.asarray(rows, dtype=np.intp)
    c = slice(None) if cols is None else np.asarray(cols, dtype=np.intp)
    out = va[r][:, c]

    def vjp(g):
        full = np.zeros_like(va)
        # add.at so repeated indices accumulate
        if rows is None:
            np.add.at(full, (slice(None), c), g)
        elif cols is None:
            np.add.at(full, r, g)
        else:
            np.add.at(full, np.ix_(r, c), g)
        return full

    return _make(out, (a,), (vjp,))


# reductions --------------------------------------------------------------------

def sum(a, axis=None):
    va = value(a)
    shape = va.shape
    out = va.sum(axis=axis, keepdims=axis is not None)
    return _make(out, (a,), (lambda g: np.broadcast_to(g, shape).copy(),))


def mean(a, axis=None):
    va = value(a)
    n = va.size if axis is None else va.shape[axis]
    return sum(a, axis) * (1.0 / n)


def softmax(a, axis=0):
    va = value(a)
    z = va - va.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _make(out, (a,), (vjp,))


def log_softmax(a, axis=0):
    va = value(a)
    z = va - va.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, (a,), (lambda g: g - sm * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood; ``logits`` is (n_classes, batch)."""
    labels = np.asarray(labels, dtype=np.intp)
    lp = log_softmax(logits, axis=0)
    cols = np.arange(labels.size)
    picked = take_pick(lp, labels, cols)
    return neg(mean(picked))


def take_pick(a, rows, cols):
    va = value(a)

    def vjp(g):
        full = np.zeros_like(va)
        np.add.at(full, (rows, cols), g.ravel())
        return full

    return _make(va[rows, cols].reshape(1, -1), (a,), (vjp,))


# normalisation -----------------------------------------------------------------

def pure_norm(a, dim: int, eps: float):
    """Column-wise ``x / sqrt(|x|^2 / dim + eps)`` (no centring, no affine)."""
    x = value(a)
    ms = np.einsum("ij,ij->j", x, x)[None, :] / dim + eps
    inv = 1.0 / np.sqrt(ms)
    out = x * inv

    def vjp(g):
        dot = np.einsum("ij,ij->j", g, x)[None, :]
        return g * inv - x * (inv ** 3) * dot / dim

    return _make(out, (a,), (vjp,))


def center(a):
    """Subtract each column's mean over its rows."""
    return sub(a, mean(a, axis=0))


def layer_norm(a, gamma, beta, eps: float):
    d = value(a).shape[0]
    return add(mul(gamma, pure_norm(center(a), d, eps)), beta)


def rms_norm(a, gamma, eps: float):
    d = value(a).shape[0]
    return mul(gamma, pure_norm(a, d, eps))


# driver ------------------------------------------------------------------------

def grad(f, params):
    """Gradients of scalar ``f`` with respect to each ``Var`` in ``params``."""
    if not isinstance(f, Var):
        return [np.zeros_like(value(p)) for p in params]
    if f.value.size != 1:
        raise ContractError(f"grad needs a scalar output, got shape {f.value.shape}")
    grads = {f.index: np.ones_like(f.value)}
    nodes = f.tape.nodes
    for i in range(f.index, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = nodes[i]
        if not node.edges:
            grads[i] = g  # leaf: keep for lookup
            continue
        for parent, fn in node.edges:
            contrib = fn(g)
            j = parent.index
            if j in grads:
                grads[j] = grads[j] + contrib
            else:
                grads[j] = contrib
    out = []
    for p in params:
        if isinstance(p, Var) and p.tape is f.tape and p.index in grads:
            out.append(np.asarray(grads[p.index]).reshape(p.value.shape))
        else:
            out.append(np.zeros_like(value(p)))
    return out
