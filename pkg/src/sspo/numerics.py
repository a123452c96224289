"""Dense float64 arithmetic, a small reverse-mode tape, and seeded randomness.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Gradients are
available for a fixed set of primitives (affine maps, tanh, relu, square,
mean, sum, log-sigmoid and scalar arithmetic); anything else applied to a
traced value raises :class:`~sspo.errors.UnsupportedPrimitive`.

The functions :func:`add`, :func:`matmul`, :func:`tanh`, ... accept either
ndarrays or :class:`Var` nodes. Called on ndarrays only they simply compute,
so the same model code serves both fast inference and traced evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ShapeMismatch, UnsupportedPrimitive

__all__ = [
    "Var", "ParamVector", "Segment", "SeededRng",
    "as_tensor", "mse", "log_sigmoid", "sigmoid", "softplus",
    "add", "sub", "mul", "neg", "matmul", "tanh", "relu", "square",
    "mean", "sum_", "reshape", "grad", "value_and_grad", "central_difference",
]


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# --------------------------------------------------------------------------
# Reverse-mode tape
# --------------------------------------------------------------------------

class Var:
    """A traced array value with a backward rule for each parent."""

    __slots__ = ("value", "parents", "backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = as_tensor(value)
        self.parents = parents
        self.backward = backward

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    # numpy interop: only registered arithmetic is allowed to touch a Var
    _UFUNCS = {}

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        op = Var._UFUNCS.get(ufunc)
        if method != "__call__" or op is None or kwargs:
            raise UnsupportedPrimitive(f"{ufunc.__name__} is not a registered primitive")
        return op(*inputs)

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedPrimitive(f"{func.__name__} is not a registered primitive")

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise UnsupportedPrimitive("division by a traced value")
        return mul(self, 1.0 / as_tensor(other))

    def __pow__(self, p):
        if p == 2:
            return square(self)
        raise UnsupportedPrimitive(f"power {p!r}")

    def __getitem__(self, idx):
        value = self.value[idx]
        shape = self.value.shape

        def back(g):
            out = np.zeros(shape)
            out[idx] += g
            return (out,)

        return Var(value, (self,), back)

    def reshape(self, *shape):
        old = self.value.shape
        return Var(self.value.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def __float__(self):
        return float(self.value)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _split(*args):
    """Separate traced parents from constants; returns (values, traced mask)."""
    return [a.value if isinstance(a, Var) else as_tensor(a) for a in args], \
        [isinstance(a, Var) for a in args]


def _node(value, args, mask, rules):
    parents = tuple(a for a, m in zip(args, mask) if m)
    if not parents:
        return value

    def back(g):
        return tuple(rule(g) for rule, m in zip(rules, mask) if m)

    return Var(value, parents, back)


def add(a, b):
    (x, y), mask = _split(a, b)
    if not any(mask):
        return x + y
    return _node(x + y, (a, b), mask,
                 (lambda g: _unbroadcast(g, x.shape), lambda g: _unbroadcast(g, y.shape)))


def sub(a, b):
    (x, y), mask = _split(a, b)
    if not any(mask):
        return x - y
    return _node(x - y, (a, b), mask,
                 (lambda g: _unbroadcast(g, x.shape), lambda g: -_unbroadcast(g, y.shape)))


def mul(a, b):
    (x, y), mask = _split(a, b)
    if not any(mask):
        return x * y
    return _node(x * y, (a, b), mask,
                 (lambda g: _unbroadcast(g * y, x.shape), lambda g: _unbroadcast(g * x, y.shape)))


def neg(a):
    return mul(a, -1.0)


def matmul(a, b):
    (x, y), mask = _split(a, b)
    if x.ndim not in (1, 2) or y.ndim != 2:
        raise UnsupportedPrimitive("matmul supports (n,k)@(k,m) and (k,)@(k,m) only")
    if x.shape[-1] != y.shape[0]:
        raise ShapeMismatch(f"matmul {x.shape} @ {y.shape}")
    out = x @ y
    if not any(mask):
        return out
    if x.ndim == 1:
        rules = (lambda g: y @ g, lambda g: np.outer(x, g))
    else:
        rules = (lambda g: g @ y.T, lambda g: x.T @ g)
    return _node(out, (a, b), mask, rules)


def tanh(a):
    (x,), mask = _split(a)
    out = np.tanh(x)
    if not any(mask):
        return out
    return _node(out, (a,), mask, (lambda g: g * (1.0 - out * out),))


def relu(a):
    (x,), mask = _split(a)
    out = np.maximum(x, 0.0)
    if not any(mask):
        return out
    return _node(out, (a,), mask, (lambda g: g * (x > 0),))


def square(a):
    (x,), mask = _split(a)
    if not any(mask):
        return x * x
    return _node(x * x, (a,), mask, (lambda g: 2.0 * g * x,))


def sum_(a, axis=None):
    (x,), mask = _split(a)
    out = x.sum(axis=axis)
    if not any(mask):
        return out

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.shape).copy()

    return _node(out, (a,), mask, (rule,))


def mean(a, axis=None):
    x = a.value if isinstance(a, Var) else as_tensor(a)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / n)


def reshape(a, shape):
    if isinstance(a, Var):
        return a.reshape(shape)
    return as_tensor(a).reshape(shape)


def log_sigmoid(a):
    """Numerically stable ``log(1 / (1 + exp(-x)))``."""
    (x,), mask = _split(a)
    out = -np.logaddexp(0.0, -x)
    if not any(mask):
        return out if out.ndim else float(out)
    return _node(out, (a,), mask, (lambda g: g * expit(-x),))


def sigmoid(x):
    out = expit(as_tensor(x))
    return out if out.ndim else float(out)


def softplus(x):
    out = np.logaddexp(0.0, as_tensor(x))
    return out if out.ndim else float(out)


Var._UFUNCS.update({
    np.add: add, np.subtract: sub, np.multiply: mul, np.matmul: matmul,
    np.negative: neg, np.tanh: tanh, np.square: square,
})


def _backprop(root: Var) -> dict:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or node.backward is None:
            if g is not None:
                grads[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return grads


# --------------------------------------------------------------------------
# Parameter vectors
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamVector:
    """Flat float64 parameter array with named segments.

    ``values`` may also hold a :class:`Var` while a gradient is being traced;
    :meth:`segment` works the same either way.
    """

    __slots__ = ("values", "layout")

    def __init__(self, values, layout: Sequence[Segment]):
        layout = tuple(layout)
        expected = 0
        for seg in layout:
            if seg.offset != expected:
                raise ShapeMismatch(f"segment {seg.name!r} starts at {seg.offset}, expected {expected}")
            expected += seg.size
        n = len(values)
        if n != expected:
            raise ShapeMismatch(f"layout covers {expected} values but got {n}")
        if not isinstance(values, Var):
            values = np.array(values, dtype=np.float64)
            values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", layout)

    def __setattr__(self, name, value):
        raise AttributeError("ParamVector is immutable")

    def __len__(self):
        return len(self.values)

    def segment(self, name: str):
        for seg in self.layout:
            if seg.name == name:
                return self.values[seg.offset:seg.offset + seg.size].reshape(seg.shape)
        raise KeyError(name)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    @classmethod
    def from_segments(cls, named_arrays: Sequence[tuple]) -> "ParamVector":
        layout, chunks, offset = [], [], 0
        for name, arr in named_arrays:
            arr = as_tensor(arr)
            layout.append(Segment(name, offset, tuple(arr.shape)))
            chunks.append(arr.ravel())
            offset += arr.size
        flat = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(flat, layout)

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    __hash__ = None

    def __repr__(self):
        return f"ParamVector(n={len(self)}, segments={[s.name for s in self.layout]})"


def value_and_grad(loss_fn: Callable, theta: ParamVector, has_aux: bool = False):
    """Evaluate ``loss_fn(theta)`` and its gradient with respect to ``theta``.

    With ``has_aux`` the function must return ``(loss, aux)``; ``aux`` is
    passed through untouched. Returns ``(loss, grad)`` or ``(loss, aux, grad)``.
    """
    leaf = Var(theta.values)
    out = loss_fn(theta.with_values(leaf))
    aux = None
    if has_aux:
        out, aux = out
    if isinstance(out, Var):
        if out.value.size != 1:
            raise ShapeMismatch(f"loss must be scalar, got shape {out.value.shape}")
        g = _backprop(out).get(id(leaf), np.zeros(len(theta)))
        loss = float(out.value)
    else:
        loss = float(np.asarray(out))
        g = np.zeros(len(theta))
    gv = theta.with_values(g)
    return (loss, aux, gv) if has_aux else (loss, gv)


def grad(loss_fn: Callable, theta: ParamVector) -> ParamVector:
    """dLoss/dtheta as a ParamVector sharing ``theta``'s layout."""
    return value_and_grad(loss_fn, theta)[1]


def central_difference(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a flat array."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = f(x.copy())
        x[i] = orig - h
        fm = f(x.copy())
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return g


# --------------------------------------------------------------------------
# Elementwise helpers on plain tensors
# --------------------------------------------------------------------------

def mse(pred, target) -> float:
    """Mean of squared elementwise differences."""
    p, q = as_tensor(pred), as_tensor(target)
    if p.shape != q.shape:
        raise ShapeMismatch(f"mse: {p.shape} vs {q.shape}")
    d = p - q
    return float(np.mean(d * d)) if d.size else 0.0


# --------------------------------------------------------------------------
# Random numbers
# --------------------------------------------------------------------------

class SeededRng:
    """Deterministic random source.

    Uniforms come from PCG64 (53-bit doubles in [0, 1)) keyed by a
    ``SeedSequence(seed, spawn_key=key)``. Normals use the Box-Muller
    transform on consecutive uniform pairs: ``u1, u2`` give
    ``r*cos(2*pi*u2), r*sin(2*pi*u2)`` with ``r = sqrt(-2*log(1 - u1))``;
    an odd request discards the final sine value.

    Split rule: ``child(*key)`` returns a generator keyed by
    ``(seed, parent_key + key)``. It ignores how far the parent has been
    consumed, so children are reproducible from the key alone.
    """

    algorithm = "pcg64-seedseq/box-muller"

    def __init__(self, seed: int, key: tuple = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(ss))
        self.n_uniform = 0
        self.n_normal = 0

    def child(self, *key) -> "SeededRng":
        return SeededRng(self.seed, self.key + tuple(key))

    def uniform(self, size=None):
        out = self._gen.random(size)
        self.n_uniform += 1 if size is None else int(np.prod(size))
        return out

    def normal(self, shape=()) -> np.ndarray:
        shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self._gen.random(2 * m)
        self.n_uniform += 2 * m
        self.n_normal += n
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        phi = 2.0 * math.pi * u[1::2]
        z = np.column_stack((r * np.cos(phi), r * np.sin(phi))).ravel()[:n]
        return z.reshape(shape)

    def integers(self, high: int, size=None):
        """Uniform integers in ``[0, high)``."""
        u = self.uniform(size)
        out = np.minimum(np.floor(np.asarray(u) * high).astype(np.int64), high - 1)
        return int(out) if size is None else out
