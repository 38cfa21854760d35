"""Tape-based reverse-mode differentiation over numpy arrays.

Every op builds a new :class:`Tensor` holding its value, its parent tensors
and a closure that pushes the output gradient back to the parents.  Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order.  All arithmetic is float64.
"""
from __future__ import annotations

import numpy as np


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def _accumulate(self, g):
        # never mutate in place: ``g`` may alias another node's buffer
        if self.grad is None:
            self.grad = np.asarray(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self, seed=1.0):
        """Propagate d(self)/d(leaf) into every reachable ``.grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {self.data.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.full(self.data.shape, seed, dtype=np.float64))
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def param(x):
    """Leaf tensor that collects a gradient."""
    return Tensor(x, requires_grad=True)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, (a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    out.backward_fn = bw
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, (a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    out.backward_fn = bw
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, (a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out.backward_fn = bw
    return out


def matmul(a, b):
    """``a @ b`` with numpy semantics for ndim >= 2 operands."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data @ b.data, (a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    out.backward_fn = bw
    return out


def linear(x, w, b=None):
    """``x @ w.T + b`` over the last axis of ``x``."""
    x, w = as_tensor(x), as_tensor(w)
    parents = (x, w) if b is None else (x, w, as_tensor(b))
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    y = x2 @ w.data.T
    if b is not None:
        y += parents[2].data
    out = Tensor(y.reshape(*lead, y.shape[-1]), parents)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x._accumulate((g2 @ w.data).reshape(x.data.shape))
        if w.requires_grad:
            w._accumulate(g2.T @ x2)
        if b is not None and parents[2].requires_grad:
            parents[2]._accumulate(g2.sum(axis=0))

    out.backward_fn = bw
    return out


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y, (a,))
    out.backward_fn = lambda g: a._accumulate(g * (1.0 - y * y))
    return out


def sigmoid(a):
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = Tensor(y, (a,))
    out.backward_fn = lambda g: a._accumulate(g * y * (1.0 - y))
    return out


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0), (a,))
    out.backward_fn = lambda g: a._accumulate(g * mask)
    return out


def identity(a):
    return as_tensor(a)


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y, (a,))
    out.backward_fn = lambda g: a._accumulate(g * y)
    return out


def square(a):
    a = as_tensor(a)
    out = Tensor(a.data * a.data, (a,))
    out.backward_fn = lambda g: a._accumulate(2.0 * g * a.data)
    return out


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape))

    out.backward_fn = bw
    return out


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), (a,))
    out.backward_fn = lambda g: a._accumulate(g.reshape(a.data.shape))
    return out


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    out = Tensor(np.swapaxes(a.data, ax1, ax2), (a,))
    out.backward_fn = lambda g: a._accumulate(np.swapaxes(g, ax1, ax2))
    return out


def broadcast_to(a, shape):
    a = as_tensor(a)
    out = Tensor(np.broadcast_to(a.data, shape), (a,))
    out.backward_fn = lambda g: a._accumulate(_unbroadcast(g, a.data.shape))
    return out


def getitem(a, idx):
    a = as_tensor(a)
    out = Tensor(a.data[idx], (a,))

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    out.backward_fn = bw
    return out


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    out.backward_fn = bw
    return out


def stack(tensors, axis=0):
    """Stack equally shaped tensors along a new axis."""
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis), tuple(tensors))

    def bw(g):
        for k, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, k, axis=axis))

    out.backward_fn = bw
    return out


def softmax(a, axis=-1):
    """Max-shifted softmax; rows land on the probability simplex."""
    a = as_tensor(a)
    y = softmax_np(a.data, axis=axis)
    out = Tensor(y, (a,))

    def bw(g):
        a._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    out.backward_fn = bw
    return out


def softmax_np(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_row(scores):
    """Softmax of a single finite score vector."""
    return softmax_np(np.asarray(scores, dtype=np.float64))


def norm(a, axis=-1):
    """Euclidean norm along ``axis``; the subgradient at zero is taken as 0."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis))
    out = Tensor(n, (a,))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        a._accumulate(np.expand_dims(scale, axis) * a.data)

    out.backward_fn = bw
    return out


def standardize(a, var_floor=1e-12):
    """Per-row zero-mean, unit-variance rescaling along the last axis.

    Rows whose variance is at most ``var_floor`` map to zeros (and pass no
    gradient), so a constant row never divides by ~0.
    """
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    ok = var > var_floor
    sd = np.sqrt(np.where(ok, var, 1.0))
    z = np.where(ok, (x - mu) / sd, 0.0)
    out = Tensor(z, (a,))

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gz = (g * z).mean(axis=-1, keepdims=True)
        a._accumulate(np.where(ok, (g - gm - z * gz) / sd, 0.0))

    out.backward_fn = bw
    return out


def standardize_np(x, var_floor=1e-12):
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    ok = var > var_floor
    return np.where(ok, (x - mu) / np.sqrt(np.where(ok, var, 1.0)), 0.0)


def hinge(a):
    """``[a]_+``; zero gradient where the bracket is inactive (a <= 0)."""
    return relu(a)


ACTIVATIONS = {"tanh": tanh, "relu": relu, "identity": identity, "sigmoid": sigmoid}

ACTIVATIONS_NP = {
    "tanh": np.tanh,
    "relu": lambda x: np.maximum(x, 0.0),
    "identity": lambda x: x,
    "sigmoid": lambda x: 0.5 * (1.0 + np.tanh(0.5 * x)),
}
