"""Dense float64 tensors with reverse-mode differentiation.

Every op records a closure that pushes the output gradient back to its
parents. Graph construction is skipped when no input requires a gradient,
so teacher forwards over frozen parameters cost no more than plain numpy.
"""
from __future__ import annotations

import builtins

import numpy as np

from .. import _kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class FrozenParameterError(RuntimeError):
    """Gradient accumulation was attempted on a frozen parameter."""


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "frozen", "_parents", "_backward")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.frozen = False
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def __len__(self):
        return len(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.values

    def item(self):
        return float(self.values)

    def accumulate(self, g):
        if self.frozen:
            raise FrozenParameterError("cannot accumulate gradient into a frozen parameter")
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.values.shape:
            raise DimensionError(f"gradient shape {g.shape} != value shape {self.values.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.values.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.values)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

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

    def __truediv__(self, other):
        return mul(self, 1.0 / _raw(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)


def _topological(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _raw(x):
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(values, parents, backward):
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.values + b.values, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.values - b.values, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    return _result(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def matmul(a, b):
    """Matrix product of ``a`` [m, k] and ``b`` [k, n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.values, b.values
    return _result(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a):
    a = as_tensor(a)
    return _result(a.values.T, (a,), lambda g: (g.T,))


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` stored as [out, in]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear shape mismatch: {x.shape} x {weight.shape}^T")
    xv, wv = x.values, weight.values
    out = xv @ wv.T
    if bias is None:
        return _result(out, (x, weight), lambda g: (g @ wv, g.T @ xv))
    bias = as_tensor(bias)
    out = out + bias.values
    return _result(out, (x, weight, bias), lambda g: (g @ wv, g.T @ xv, g.sum(axis=0)))


def relu(x):
    x = as_tensor(x)
    out = np.maximum(x.values, 0.0)
    return _result(out, (x,), lambda g: (g * (out > 0),))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.values)
    return _result(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    v = x.values
    return _result(np.log(v), (x,), lambda g: (g / v,))


def square(x):
    x = as_tensor(x)
    v = x.values
    return _result(v * v, (x,), lambda g: (2.0 * g * v,))


def sqrt(x):
    """Elementwise square root; the gradient at exactly 0 is taken as 0."""
    x = as_tensor(x)
    out = np.sqrt(x.values)
    safe = np.where(out > 0, out, 1.0)
    return _result(out, (x,), lambda g: (np.where(out > 0, 0.5 * g / safe, 0.0),))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(x.values.sum(axis=axis, keepdims=keepdims), (x,), back)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.values.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / builtins.max(n, 1))


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _result(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take(x, index):
    """Numpy-style indexing; repeated integer indices accumulate on backward."""
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.values[index], (x,), back)


def take_rows(x, rows):
    """Gather rows ``x[rows]`` for an integer array of any shape."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, rows, g)
        return (full,)

    return _result(x.values[rows], (x,), back)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def group_max(x, group_size):
    """Max over consecutive row groups: [R * S, F] -> [R, F].

    Same result and gradient routing as ``max(reshape(x, (R, S, F)), 1)``
    but runs through the compiled kernel when it is available.
    """
    x = as_tensor(x)
    n, f = x.shape
    if n % group_size:
        raise DimensionError(f"{n} rows do not split into groups of {group_size}")
    v = x.values.reshape(n // group_size, group_size, f)
    out, arg = _kernels.group_max(v)

    def back(g):
        full = np.zeros_like(v)
        np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
        return (full.reshape(n, f),)

    return _result(out, (x,), back)


def max(x, axis):  # noqa: A001 - mirrors numpy
    """Max-reduce over ``axis``; gradient routes to the first maximal entry."""
    x = as_tensor(x)
    v = x.values
    arg = np.expand_dims(v.argmax(axis=axis), axis)
    out = np.take_along_axis(v, arg, axis=axis)

    def back(g):
        full = np.zeros_like(v)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(np.squeeze(out, axis=axis), (x,), back)


def softmax(x, axis=-1):
    x = as_tensor(x)
    v = x.values
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (x,),
                   lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    v = x.values
    shifted = v - v.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _result(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits, target, weights=None):
    """Mean of ``-log softmax(logits)[target]`` over rows.

    ``logits`` may be a single vector with an integer target, or [n, C] with
    an integer array of targets. Optional per-row ``weights`` turn the mean
    into ``sum(w * ce) / max(sum(w), 1)``, which stays connected to the graph
    (with zero gradient) when every weight is zero.
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    if single:
        logits = reshape(logits, (1, -1))
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n, c = logits.shape
    if target.shape != (n,):
        raise DimensionError(f"targets {target.shape} do not match logits {logits.shape}")
    if np.any(target < 0) or np.any(target >= c):
        raise IndexError(f"target index out of range for {c} classes")
    logp = log_softmax(logits, axis=1)
    picked = take(logp, (np.arange(n), target))
    if weights is None:
        return mean(-picked)
    w = np.asarray(weights, dtype=np.float64)
    return mul(sum(mul(-picked, w)), 1.0 / builtins.max(w.sum(), 1.0))


def huber(pred, target, delta=1.0, weights=None):
    """Smooth-L1 with threshold ``delta``, mean-reduced over all elements.

    With per-row ``weights`` the reduction is a weighted sum over rows divided
    by ``max(sum(weights), 1)`` (elements within a row are summed).
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"huber shape mismatch: {pred.shape} vs {target.shape}")
    if delta <= 0:
        raise ValueError("delta must be positive")
    r = pred.values - target.values
    a = np.abs(r)
    quad = a <= delta
    elem = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    dr = np.where(quad, r, delta * np.sign(r))
    if weights is None:
        scale = 1.0 / builtins.max(r.size, 1)
        val = elem.sum() * scale
        dl = dr * scale
    else:
        w = np.asarray(weights, dtype=np.float64)
        scale = 1.0 / builtins.max(w.sum(), 1.0)
        wb = w.reshape(w.shape + (1,) * (r.ndim - w.ndim))
        val = (elem * wb).sum() * scale
        dl = dr * wb * scale
    return _result(np.asarray(val), (pred, target), lambda g: (g * dl, -g * dl))

