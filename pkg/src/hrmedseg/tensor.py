"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array plus an optional gradient buffer. Every
differentiable operation records itself on an implicit tape (creation-order
sequence numbers on the output tensors); ``backward`` replays the recorded
backward rules in reverse creation order, which is always a valid reverse
topological order because inputs exist before their consumers.

Values are 32-bit by default. ``default_dtype("float64")`` switches the
whole engine to 64-bit, which exists for tightening gradient checks.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from itertools import count

import numpy as np
from scipy.special import erf

_DTYPE = np.float32
_FINITE_CHECKS = True
_seq = count()

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_default_dtype(name):
    """Set the global element type: "float32" (default) or "float64"."""
    global _DTYPE
    if name in ("float32", np.float32):
        _DTYPE = np.float32
    elif name in ("float64", np.float64):
        _DTYPE = np.float64
    else:
        raise ValueError(f"unsupported dtype {name!r}")


def get_default_dtype():
    return _DTYPE


@contextmanager
def default_dtype(name):
    """Temporarily switch the global element type."""
    prev = _DTYPE
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextmanager
def finite_checks(enabled):
    """Temporarily enable/disable NaN/Inf screening of op outputs."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


class Tensor:
    """n-dimensional real array with optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_rule", "_seq")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._rule = None
        self._seq = next(_seq)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr, op):
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")


def _record(data, parents, rule, op):
    """Create an op output, attaching the backward rule when grads can flow."""
    data = np.asarray(data, dtype=_DTYPE)
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._rule = rule
    else:
        out.requires_grad = False
        out._parents = ()
        out._rule = None
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss):
    """Run reverse-mode differentiation from a scalar loss.

    Populates ``grad`` on every requires_grad leaf reachable from the loss;
    repeated leaves accumulate additively, and repeated ``backward`` calls
    also accumulate (call ``zero_grad`` between steps).
    """
    loss = as_tensor(loss)
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    flows = {id(loss): np.ones_like(loss.data)}
    for t in nodes:
        g = flows.pop(id(t), None)
        if g is None:
            continue
        if t._rule is None:
            t.grad = g if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._rule(g)):
            if pg is None or not p.requires_grad:
                continue
            pid = id(p)
            if pid in flows:
                flows[pid] = flows[pid] + pg
            else:
                flows[pid] = pg


# -- elementwise arithmetic ---------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
        "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
        "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape),
                   _unbroadcast(g * a.data, b.data.shape)),
        "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data / b.data, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.data.shape),
                   _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        "div")


def neg(a):
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    """Elementwise a**p for a scalar exponent p."""
    a = as_tensor(a)
    p = float(exponent)
    out = a.data ** p
    return _record(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "power")


def texp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def tlog(a):
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient is zero outside the active range."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype)
    return _record(out, (a,), lambda g: (g * inside,), "clip")


# -- reductions ----------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _record(out, (a,), rule, "sum")


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / n)


# -- shape ops -----------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    return _record(a.data.reshape(shape), (a,),
                   lambda g: (g.reshape(a.data.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _record(out, (a,),
                   lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx):
    """Basic (non-duplicating) indexing with ints and slices."""
    a = as_tensor(a)
    out = a.data[idx]

    def rule(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        return (buf,)

    return _record(out, (a,), rule, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tensors, rule, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def rule(g):
        return tuple(np.moveaxis(g, axis, 0)[i] for i in range(len(tensors)))

    return _record(out, tensors, rule, "stack")


# -- linear algebra -------------------------------------------------------

def matmul(a, b):
    """Matrix product of two rank-2 tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects rank-2 operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    return _record(
        a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul")


# -- activations -----------------------------------------------------------

def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    a = as_tensor(a)
    y = _sigmoid_np(a.data)
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def silu(a):
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    y = a.data * s
    return _record(y, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),), "silu")


def gelu(a):
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    y = x * cdf

    def rule(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _record(y, (a,), rule, "gelu")


def elu_plus_one(a):
    """elu(x) + 1: strictly positive kernel map used by linear attention."""
    a = as_tensor(a)
    x = a.data
    y = np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))

    def rule(g):
        return (g * np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0))),)

    return _record(y, (a,), rule, "elu_plus_one")


_ACTIVATIONS = {
    "gelu": gelu,
    "silu": silu,
    "sigmoid": sigmoid,
    "elu_plus_one": elu_plus_one,
}


def activation(a, kind):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(a)


# -- normalization and attention -------------------------------------------

def softmax_rows(a):
    """Row-stabilized softmax along the last axis."""
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record(y, (a,), rule, "softmax_rows")


def softmax_attention(q, k, v, scale=None):
    """softmax(q kᵀ · scale) v — quadratic-cost attention.

    q: m×d, k: n×d, v: n×c. scale defaults to 1/sqrt(d).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ValueError("softmax_attention expects rank-2 q, k, v")
    if q.data.shape[1] != k.data.shape[0 + 1]:
        raise ValueError(f"q/k feature dims disagree: {q.data.shape} vs {k.data.shape}")
    if k.data.shape[0] != v.data.shape[0]:
        raise ValueError(f"k/v row counts disagree: {k.data.shape} vs {v.data.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.data.shape[1])
    scores = matmul(q, transpose(k)) * scale
    return matmul(softmax_rows(scores), v)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gamma.data * xhat + beta.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        dx = (gg - m1 - xhat * m2) * inv
        return (dx, dgamma, dbeta)

    return _record(y, (x, gamma, beta), rule, "layer_norm")


# -- gradient oracle --------------------------------------------------------

def finite_diff_grad(f, x, h=1e-4):
    """Central-difference gradient of a scalar-valued f at tensor x.

    The independent oracle every gradient check compares against: perturbs
    one element at a time, (f(x+h·e) − f(x−h·e)) / 2h. Returns a plain
    gradient Tensor (no graph attached).
    """
    x = as_tensor(x)
    base = x.data.astype(np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(as_tensor(f(Tensor(base))).data.reshape(-1)[0])
        flat[i] = orig - h
        lo = float(as_tensor(f(Tensor(base))).data.reshape(-1)[0])
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return Tensor(grad)


def relative_error(a, b, floor=1e-12):
    """Norm-ratio discrepancy used by all gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
