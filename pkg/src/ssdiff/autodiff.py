"""Reverse-mode automatic differentiation on float64 numpy arrays.

A `Var` records the operation that produced it; `backward` walks the graph
in reverse topological order and accumulates exact gradients. The op set is
deliberately small: exactly what the predictor network, the manifold heads
and the closed-form KL terms need. Everything is batched: a Var holds an
ndarray of any shape and elementwise ops broadcast like numpy.

The module-level functions (`log`, `exp`, `lgamma`, ...) dispatch on type,
so numerical code written against them runs both on plain arrays (fast
paths, oracles) and on Vars (training graphs).
"""

from __future__ import annotations

import numpy as np
from scipy import special as sp

from .errors import GraphError


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` to undo numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """Node in the reverse-mode graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    # Make `ndarray <op> Var` defer to our reflected operators instead of
    # numpy building an object array.
    __array_ufunc__ = None

    def __init__(self, value, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @classmethod
    def _op(cls, value, parents, vjp):
        out = cls(value)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjp = vjp
        return out

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var({self.value!r}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        o = as_var(other)
        return Var._op(self.value + o.value, (self, o),
                       lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, o.shape)))

    __radd__ = __add__

    def __neg__(self):
        return Var._op(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        o = as_var(other)
        return Var._op(self.value - o.value, (self, o),
                       lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, o.shape)))

    def __rsub__(self, other):
        return as_var(other) - self

    def __mul__(self, other):
        o = as_var(other)
        return Var._op(self.value * o.value, (self, o),
                       lambda g: (_unbroadcast(g * o.value, self.shape),
                                  _unbroadcast(g * self.value, o.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = as_var(other)
        return Var._op(self.value / o.value, (self, o),
                       lambda g: (_unbroadcast(g / o.value, self.shape),
                                  _unbroadcast(-g * self.value / o.value**2, o.shape)))

    def __rtruediv__(self, other):
        return as_var(other) / self

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        return Var._op(self.value ** exponent, (self,),
                       lambda g: (g * exponent * self.value ** (exponent - 1),))

    def __matmul__(self, other):
        o = as_var(other)
        a, b = self.value, o.value

        def vjp(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Var._op(a @ b, (self, o), vjp)

    def __rmatmul__(self, other):
        return as_var(other) @ self

    def __getitem__(self, idx):
        def vjp(g):
            out = np.zeros_like(self.value)
            np.add.at(out, idx, g)
            return (out,)

        return Var._op(self.value[idx], (self,), vjp)

    # -- shape --------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Var._op(self.value.reshape(shape), (self,),
                       lambda g: (g.reshape(self.shape),))

    def transpose(self, axes):
        inverse = np.argsort(axes)
        return Var._op(self.value.transpose(axes), (self,),
                       lambda g: (g.transpose(inverse),))

    def swap_last(self):
        """Transpose the trailing two axes (batched matrix transpose)."""
        return Var._op(np.swapaxes(self.value, -1, -2), (self,),
                       lambda g: (np.swapaxes(g, -1, -2),))

    def sum(self, axis=None, keepdims=False):
        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, self.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, self.shape).copy(),)

        return Var._op(self.value.sum(axis=axis, keepdims=keepdims), (self,), vjp)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    # -- autodiff driver ----------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into `.grad` of every reachable leaf."""
        if self.value.ndim != 0:
            raise GraphError("backward() requires a scalar root")
        if not self.requires_grad:
            raise GraphError("root is detached from every trainable leaf")

        order: list[Var] = []
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def is_var(x) -> bool:
    return isinstance(x, Var)


# -- dispatching math functions (work on ndarray or Var) ---------------------

def _unary(x, fn, dfn):
    if isinstance(x, Var):
        val = fn(x.value)
        return Var._op(val, (x,), lambda g, v=val: (g * dfn(x.value, v),))
    return fn(np.asarray(x, dtype=np.float64))


def log(x):
    return _unary(x, np.log, lambda v, out: 1.0 / v)


def exp(x):
    return _unary(x, np.exp, lambda v, out: out)


def sqrt(x):
    return _unary(x, np.sqrt, lambda v, out: 0.5 / out)


def sin(x):
    return _unary(x, np.sin, lambda v, out: np.cos(v))


def cos(x):
    return _unary(x, np.cos, lambda v, out: -np.sin(v))


def arctan(x):
    return _unary(x, np.arctan, lambda v, out: 1.0 / (1.0 + v * v))


def sigmoid(x):
    return _unary(x, sp.expit, lambda v, out: out * (1.0 - out))


def lgamma(x):
    return _unary(x, sp.gammaln, lambda v, out: sp.digamma(v))


def swish(x):
    return x * sigmoid(x)


def clip(x, lo, hi):
    """Clamp with zero gradient outside [lo, hi]."""
    if isinstance(x, Var):
        mask = (x.value >= lo) & (x.value <= hi)
        return Var._op(np.clip(x.value, lo, hi), (x,),
                       lambda g: (g * mask,))
    return np.clip(np.asarray(x, dtype=np.float64), lo, hi)


def logsumexp(x, axis=-1, keepdims=False):
    if isinstance(x, Var):
        val = sp.logsumexp(x.value, axis=axis, keepdims=keepdims)

        def vjp(g):
            full = val if keepdims else np.expand_dims(val, axis)
            soft = np.exp(x.value - full)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (gg * soft,)

        return Var._op(val, (x,), vjp)
    return sp.logsumexp(np.asarray(x, dtype=np.float64), axis=axis, keepdims=keepdims)


def softmax(x, axis=-1):
    return exp(x - logsumexp(x, axis=axis, keepdims=True))


def concat(parts, axis=-1):
    parts = list(parts)
    if any(isinstance(p, Var) for p in parts):
        parts = [as_var(p) for p in parts]
        sizes = [p.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def vjp(g):
            slicer = [slice(None)] * g.ndim
            outs = []
            for i in range(len(parts)):
                slicer[axis] = slice(offsets[i], offsets[i + 1])
                outs.append(g[tuple(slicer)])
            return tuple(outs)

        return Var._op(np.concatenate([p.value for p in parts], axis=axis), parts, vjp)
    return np.concatenate(parts, axis=axis)


def matmul(a, b):
    if isinstance(a, Var) or isinstance(b, Var):
        return as_var(a) @ as_var(b)
    return np.asarray(a) @ np.asarray(b)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


# -- batched linear algebra ---------------------------------------------------

def inverse(x):
    """Matrix inverse over the trailing two axes."""
    if isinstance(x, Var):
        inv = np.linalg.inv(x.value)

        def vjp(g):
            it = np.swapaxes(inv, -1, -2)
            return (-it @ g @ it,)

        return Var._op(inv, (x,), vjp)
    return np.linalg.inv(x)


def logdet(x):
    """log|X| over the trailing two axes; X must have positive determinant."""
    if isinstance(x, Var):
        sign, val = np.linalg.slogdet(x.value)
        if np.any(sign <= 0):
            raise GraphError("logdet of a non-positive-determinant matrix")
        inv_t = np.swapaxes(np.linalg.inv(x.value), -1, -2)
        return Var._op(val, (x,), lambda g: (g[..., None, None] * inv_t,))
    sign, val = np.linalg.slogdet(x)
    return val


def trace(x):
    """Trace over the trailing two axes."""
    if isinstance(x, Var):
        n = x.shape[-1]
        eye = np.eye(n)

        def vjp(g):
            return (g[..., None, None] * eye,)

        return Var._op(np.trace(x.value, axis1=-2, axis2=-1), (x,), vjp)
    return np.trace(x, axis1=-2, axis2=-1)


def fill_lower_triangular(raw, p):
    """Pack (..., p(p+1)/2) into lower-triangular (..., p, p) matrices."""
    rows, cols = np.tril_indices(p)
    if isinstance(raw, Var):
        batch = raw.shape[:-1]
        out_val = np.zeros(batch + (p, p))
        out_val[..., rows, cols] = raw.value

        def vjp(g):
            return (g[..., rows, cols],)

        return Var._op(out_val, (raw,), vjp)
    raw = np.asarray(raw, dtype=np.float64)
    out = np.zeros(raw.shape[:-1] + (p, p))
    out[..., rows, cols] = raw
    return out


def l2_normalize(x, axis=-1, eps=0.0):
    """x / ||x||; composed from primitives so it differentiates."""
    sq = (x * x).sum(axis=axis, keepdims=True) if isinstance(x, Var) else \
        np.sum(x * x, axis=axis, keepdims=True)
    return x / sqrt(sq + eps) if eps else x / sqrt(sq)
