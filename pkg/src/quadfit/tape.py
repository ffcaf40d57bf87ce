"""Reverse-mode differentiation tape over numpy arrays, with Adam and a
finite-difference gradient checker.

The graph is a flat tape: nodes append in creation order, which is a valid
topological order, so backward is a single reverse sweep. Leaves are bound to
one Tape instance and tapes are never shared between threads; mixing nodes
from two tapes raises immediately.

All public math functions accept either a Var or a plain ndarray and return
the same kind, so the rest of the package writes its pipeline once and runs
it with or without gradient tracking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class Tape:
    """Recording context for one differentiable evaluation."""

    def __init__(self):
        self.nodes = []

    def var(self, value):
        """Create a leaf variable on this tape."""
        return Var(value, self)

    def backward(self, out):
        """Accumulate gradients of a scalar output into every node's .grad."""
        if not isinstance(out, Var) or out.tape is not self:
            raise ValueError("tape mismatch")
        if out.value.size != 1:
            raise ValueError("backward expects a scalar output")
        out.grad = np.ones_like(out.value)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._parents:
                pg = vjp(g)
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg


class Var:
    """A tape node: primal value plus links to parents with VJP closures."""

    __slots__ = ("value", "tape", "grad", "_parents")

    def __init__(self, value, tape, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.grad = None
        self._parents = parents
        tape.nodes.append(self)

    # None makes ndarray's binary operators defer to the reflected Var
    # operator (so ndarray + Var stays on the tape) and makes a direct ufunc
    # call like np.sin(var) fail instead of silently dropping gradients.
    __array_ufunc__ = None

    def __array__(self, *args, **kwargs):
        raise ValueError("not differentiable")

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __neg__(self):
        return negative(self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def value(x):
    """Primal value of a Var, or the input itself."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs):
    t = None
    for x in xs:
        if isinstance(x, Var):
            if t is None:
                t = x.tape
            elif x.tape is not t:
                raise ValueError("tape mismatch")
    return t


def _unbroadcast(g, shape):
    # reduce an adjoint back to the shape of a broadcast operand
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fwd, da, db):
    av, bv = value(a), value(b)
    t = _tape_of(a, b)
    out = fwd(av, bv)
    if t is None:
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(da(g, av, bv), av.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(db(g, av, bv), bv.shape)))
    return Var(out, t, tuple(parents))


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def subtract(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def multiply(a, b):
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def divide(a, b):
    return _binary(
        a, b, lambda x, y: x / y, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y)
    )


def _unary(a, fwd, dfn):
    av = value(a)
    out = fwd(av)
    if not isinstance(a, Var):
        return out
    return Var(out, a.tape, ((a, lambda g: g * dfn(av, out)),))


def negative(a):
    return _unary(a, lambda x: -x, lambda x, o: -1.0)


def power(a, p):
    if isinstance(p, Var):
        raise ValueError("not differentiable")
    p = float(p)
    return _unary(a, lambda x: x**p, lambda x, o: p * x ** (p - 1.0))


def sin(a):
    return _unary(a, np.sin, lambda x, o: np.cos(x))


def cos(a):
    return _unary(a, np.cos, lambda x, o: -np.sin(x))


def exp(a):
    return _unary(a, np.exp, lambda x, o: o)


def log(a):
    return _unary(a, np.log, lambda x, o: 1.0 / x)


def sqrt(a):
    return _unary(a, np.sqrt, lambda x, o: 0.5 / o)


def _sigmoid_val(x):
    # exp of a non-positive argument only, so large |x| cannot overflow
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    return _unary(a, _sigmoid_val, lambda x, o: o * (1.0 - o))


def absolute(a):
    return _unary(a, np.abs, lambda x, o: np.sign(x))


def maximum(a, b):
    return _binary(
        a,
        b,
        np.maximum,
        lambda g, x, y: g * (x >= y),
        lambda g, x, y: g * (y > x),
    )


def minimum(a, b):
    return _binary(
        a,
        b,
        np.minimum,
        lambda g, x, y: g * (x <= y),
        lambda g, x, y: g * (y < x),
    )


def where(cond, a, b):
    c = np.asarray(cond, dtype=bool)
    return _binary(
        a,
        b,
        lambda x, y: np.where(c, x, y),
        lambda g, x, y: g * c,
        lambda g, x, y: g * ~c,
    )


def clip(a, lo, hi):
    av = value(a)
    inside = (av > lo) & (av < hi)
    return _unary(a, lambda x: np.clip(x, lo, hi), lambda x, o: inside.astype(float))


def sum(a, axis=None, keepdims=False):
    av = value(a)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, av.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    out = av.sum(axis=axis, keepdims=keepdims)
    if not isinstance(a, Var):
        return out
    return Var(out, a.tape, ((a, vjp),))


def mean(a, axis=None, keepdims=False):
    av = value(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) / float(n)


def take(a, idx):
    av = value(a)

    def vjp(g):
        z = np.zeros_like(av)
        np.add.at(z, idx, g)
        return z

    out = av[idx]
    if not isinstance(a, Var):
        return out
    return Var(out, a.tape, ((a, vjp),))


def reshape(a, shape):
    av = value(a)
    out = av.reshape(shape)
    if not isinstance(a, Var):
        return out
    return Var(out, a.tape, ((a, lambda g: g.reshape(av.shape)),))


def transpose(a, axes=None):
    av = value(a)
    if axes is None:
        axes = tuple(range(av.ndim))[::-1]
    inv = np.argsort(axes)
    out = av.transpose(axes)
    if not isinstance(a, Var):
        return out
    return Var(out, a.tape, ((a, lambda g: g.transpose(inv)),))


def mT(a):
    """Swap the last two axes."""
    nd = value(a).ndim
    axes = list(range(nd))
    axes[-2], axes[-1] = axes[-1], axes[-2]
    return transpose(a, tuple(axes))


def _unb_mat(g, shape):
    # reduce broadcast batch dims of a matmul adjoint; last two dims match
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i in range(g.ndim - 2):
        if shape[i] == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def matmul(a, b):
    av, bv = value(a), value(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dimensions")
    t = _tape_of(a, b)
    out = av @ bv
    if t is None:
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unb_mat(g @ np.swapaxes(bv, -1, -2), av.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unb_mat(np.swapaxes(av, -1, -2) @ g, bv.shape)))
    return Var(out, t, tuple(parents))


def stack(xs, axis=0):
    vals = [value(x) for x in xs]
    t = _tape_of(*xs)
    out = np.stack(vals, axis=axis)
    if t is None:
        return out
    parents = []
    for i, x in enumerate(xs):
        if isinstance(x, Var):

            def vjp(g, _i=i):
                return np.take(g, _i, axis=axis)

            parents.append((x, vjp))
    return Var(out, t, tuple(parents))


def concatenate(xs, axis=0):
    vals = [value(x) for x in xs]
    t = _tape_of(*xs)
    out = np.concatenate(vals, axis=axis)
    if t is None:
        return out
    parents = []
    off = 0
    for x, v in zip(xs, vals):
        n = v.shape[axis]
        if isinstance(x, Var):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(off, off + n)

            def vjp(g, _sl=tuple(sl)):
                return g[_sl]

            parents.append((x, vjp))
        off += n
    return Var(out, t, tuple(parents))


# Rotation-matrix coefficients a(q) = sin(sqrt q)/sqrt q and
# b(q) = (1 - cos(sqrt q))/q with q = theta^2. Both are analytic even
# functions of theta, so they are smooth in q; series guards below keep the
# value and derivative finite at q = 0.
_ROT_EPS = 1e-8


def _rot_a_val(q):
    th = np.sqrt(np.maximum(q, _ROT_EPS))
    return np.where(q < _ROT_EPS, 1.0 - q / 6.0 + q * q / 120.0, np.sin(th) / th)


def _rot_a_deriv(q, o):
    th = np.sqrt(np.maximum(q, _ROT_EPS))
    exact = (th * np.cos(th) - np.sin(th)) / (2.0 * th**3)
    return np.where(q < _ROT_EPS, -1.0 / 6.0 + q / 60.0, exact)


def _rot_b_val(q):
    qs = np.maximum(q, _ROT_EPS)
    th = np.sqrt(qs)
    return np.where(q < _ROT_EPS, 0.5 - q / 24.0 + q * q / 720.0, (1.0 - np.cos(th)) / qs)


def _rot_b_deriv(q, o):
    qs = np.maximum(q, _ROT_EPS)
    th = np.sqrt(qs)
    exact = (th * np.sin(th) - 2.0 * (1.0 - np.cos(th))) / (2.0 * qs * qs)
    return np.where(q < _ROT_EPS, -1.0 / 24.0 + q / 360.0, exact)


def rodrigues(r):
    """Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3)."""
    rv = value(r)
    if rv.shape[-1] != 3:
        raise ValueError("shape error")
    q = sum(multiply(r, r), axis=-1)
    a = _unary(q, _rot_a_val, _rot_a_deriv)
    b = _unary(q, _rot_b_val, _rot_b_deriv)
    rx = take(r, (Ellipsis, 0)) if isinstance(r, Var) else rv[..., 0]
    ry = take(r, (Ellipsis, 1)) if isinstance(r, Var) else rv[..., 1]
    rz = take(r, (Ellipsis, 2)) if isinstance(r, Var) else rv[..., 2]
    z = multiply(rx, 0.0)
    row0 = stack([z, negative(rz), ry], axis=-1)
    row1 = stack([rz, z, negative(rx)], axis=-1)
    row2 = stack([negative(ry), rx, z], axis=-1)
    K = stack([row0, row1, row2], axis=-2)
    K2 = matmul(K, K)
    ae = reshape(a, value(a).shape + (1, 1))
    be = reshape(b, value(b).shape + (1, 1))
    eye = np.broadcast_to(np.eye(3), value(K).shape)
    return add(eye, add(multiply(ae, K), multiply(be, K2)))


@dataclass
class OptimizerState:
    """Adam accumulators keyed like the parameter dict they update."""

    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """One Adam update in place; parameters without a gradient are untouched."""
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for k, g in grads.items():
        m = state.beta1 * state.m.get(k, 0.0) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(k, 0.0) + (1.0 - state.beta2) * (g * g)
        state.m[k] = m
        state.v[k] = v
        params[k] = params[k] - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def grad(loss_fn, params):
    """Value and exact reverse-mode gradient of loss_fn at a flat vector."""
    tape = Tape()
    x = tape.var(np.asarray(params, dtype=np.float64))
    try:
        out = loss_fn(x)
    except TypeError as e:
        # a numpy ufunc was applied directly to a Var, outside the tape
        raise ValueError("not differentiable") from e
    if not isinstance(out, Var):
        raise ValueError("not differentiable")
    if out.value.size != 1:
        raise ValueError("loss must be scalar")
    tape.backward(out)
    g = x.grad if x.grad is not None else np.zeros_like(x.value)
    return float(out.value.reshape(())), g


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst: int


def check_gradient(loss_fn, params, h=1e-5, tol=1e-4, probes=None, seed=0):
    """Compare reverse-mode gradients against central finite differences.

    Checks every coordinate when the parameter vector is small, otherwise
    `probes` random unit directions (default 10). Relative error uses
    max(|analytic|, |numeric|, 1e-6) as the scale so near-zero directional
    derivatives do not divide by zero.
    """
    x = np.asarray(params, dtype=np.float64)
    _, g = grad(loss_fn, x)

    def feval(p):
        return float(value(loss_fn(p)))

    dirs = []
    if probes is None and x.size <= 24:
        for i in range(x.size):
            e = np.zeros(x.size)
            e[i] = 1.0
            dirs.append(e.reshape(x.shape))
    else:
        n = probes if probes is not None else 10
        rng = np.random.default_rng(seed)
        for _ in range(n):
            d = rng.standard_normal(x.shape)
            dirs.append(d / np.linalg.norm(d))

    max_rel = 0.0
    worst = -1
    for i, d in enumerate(dirs):
        num = (feval(x + h * d) - feval(x - h * d)) / (2.0 * h)
        ana = float((g * d).sum())
        rel = abs(num - ana) / max(abs(num), abs(ana), 1e-6)
        if rel > max_rel:
            max_rel = rel
            worst = i
    return GradCheckReport(max_rel_err=max_rel, passed=max_rel < tol, n_checked=len(dirs), worst=worst)
