"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`GradTape` is active are recorded on it
whenever one of their inputs requires a gradient.  Outside a tape nothing is
recorded, which keeps plain forward evaluation (finite differences, scoring
at evaluation time) cheap.

Shapes follow numpy.  Elementwise binary operations accept either identical
shapes or a scalar operand; any other broadcast has to be spelled out with
:func:`broadcast_to` so that the backward reduction is explicit.
"""
from __future__ import annotations

import builtins
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

COSINE_EPS = 1e-8

DTYPES = {"double": np.float64, "single": np.float32}

_local = threading.local()


def resolve_dtype(precision):
    try:
        return DTYPES[precision]
    except KeyError:
        raise ConfigError(f"unknown precision mode {precision!r}") from None


class Tensor:
    """An n-dimensional array of reals plus a flag saying whether gradients flow to it."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class GradTape:
    """Ordered record of executed operations.

    Use as a context manager, then call :meth:`gradient` on a scalar that
    was computed inside the block.  A tape belongs to the thread that
    opened it.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out, inputs, backward):
        self._records.append((out, inputs, backward))

    def gradient(self, target, sources):
        """Gradients of scalar ``target`` w.r.t. a mapping of name -> Tensor.

        Sources that did not contribute get an all-zero array.
        """
        if target.data.size != 1:
            raise DimensionError(f"gradient target must be a scalar, got shape {target.shape}")
        grads = {id(target): np.ones_like(target.data)}
        for out, inputs, backward in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result = {}
        for name, src in sources.items():
            g = grads.get(id(src))
            result[name] = np.zeros_like(src.data) if g is None else np.asarray(g, dtype=src.dtype)
        return result


def active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, op, inputs, backward):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _sum_to(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_operands(a, b, op):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


# elementwise -----------------------------------------------------------------


def add(a, b):
    a, b = _binary_operands(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b), lambda g: (_sum_to(g, sa), _sum_to(g, sb)))


def sub(a, b):
    a, b = _binary_operands(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b), lambda g: (_sum_to(g, sa), _sum_to(-g, sb)))


def mul(a, b):
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b), lambda g: (_sum_to(g * bd, ad.shape), _sum_to(g * ad, bd.shape)))


def div(a, b):
    a, b = _binary_operands(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NumericError("div: division by zero")
    out = ad / bd

    def backward(g):
        return _sum_to(g / bd, ad.shape), _sum_to(-g * out / bd, bd.shape)

    return _make(out, "div", (a, b), backward)


def scale(x, c):
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), "scale", (x,), lambda g: (g * c,))


def tanh(x):
    out = np.tanh(x.data)
    return _make(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x):
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def exp(x):
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def relu(x):
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * pos,))


def elementwise(name, *args):
    """Dispatch by name: tanh, sigmoid, exp, relu, add, mul, sub, div, scale."""
    table = {
        "tanh": tanh, "sigmoid": sigmoid, "exp": exp, "relu": relu,
        "add": add, "mul": mul, "sub": sub, "div": div, "scale": scale,
    }
    try:
        fn = table[name]
    except KeyError:
        raise ConfigError(f"unknown elementwise op {name!r}") from None
    return fn(*args)


# linear algebra ----------------------------------------------------------------


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: {exc}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _sum_to(ga, ad.shape), _sum_to(gb, bd.shape)

    return _make(out, "matmul", (a, b), backward)


# reductions --------------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False):
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _make(out, "sum", (x,), lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)),))


def mean(x, axis=None, keepdims=False):
    shape = x.shape
    count = x.data.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    return _make(out, "mean", (x,), lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)) / count,))


def max(x, axis=-1):
    """Maximum along one axis; the gradient goes to the first maximising entry."""
    xd = x.data
    axis = axis % xd.ndim
    idx = np.argmax(xd, axis=axis)
    out = np.take_along_axis(xd, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, "max", (x,), backward)


def softmax(x, axis=-1):
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, "softmax", (x,), backward)


# shape manipulation ------------------------------------------------------------


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), "transpose", (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x, a1, a2):
    return _make(np.swapaxes(x.data, a1, a2), "swapaxes", (x,), lambda g: (np.swapaxes(g, a1, a2),))


def broadcast_to(x, shape):
    old = x.shape
    try:
        out = np.array(np.broadcast_to(x.data, shape))
    except ValueError:
        raise DimensionError(f"cannot broadcast {old} to {tuple(shape)}") from None
    return _make(out, "broadcast_to", (x,), lambda g: (_sum_to(g, old),))


def getitem(x, index):
    shape, dtype = x.shape, x.dtype

    def backward(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(np.array(x.data[index]), "getitem", (x,), backward)


def take(x, indices, axis=0):
    """Row gather (embedding lookup); repeated indices accumulate in the gradient."""
    indices = np.asarray(indices, dtype=np.intp)
    if axis != 0:
        raise DimensionError("take gathers along axis 0 only; transpose first")
    n = x.shape[0]
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise DimensionError(f"take: index out of range for extent {n}")
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, indices, g)
        return (gx,)

    return _make(x.data[indices], "take", (x,), backward)


def concat(tensors, axis=-1):
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: non-concat extents differ, {ref} vs {t.shape}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, "concat", tuple(tensors), lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(tensors, axis=0):
    tensors = list(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {exc}") from None
    n = len(tensors)
    return _make(out, "stack", tuple(tensors),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# normalisation and similarity --------------------------------------------------


def l2_normalize(x, axis=-1, eps=COSINE_EPS):
    """x / (||x|| + eps) along ``axis``; an all-zero slice maps to zero with a finite gradient."""
    xd = x.data
    norm = np.sqrt(np.sum(xd * xd, axis=axis, keepdims=True))
    denom = norm + eps
    out = xd / denom

    def backward(g):
        inner = np.sum(g * xd, axis=axis, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        coef = np.where(norm > 0, inner / (safe * denom * denom), 0.0)
        return (g / denom - xd * coef,)

    return _make(out, "l2_normalize", (x,), backward)


def cosine(a, b, axis=-1, eps=COSINE_EPS):
    """dot(a, b) / (||a|| ||b|| + eps) along ``axis``; zero vectors give 0."""
    if a.shape != b.shape:
        raise DimensionError(f"cosine: shapes differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    dot = np.sum(ad * bd, axis=axis)
    na = np.sqrt(np.sum(ad * ad, axis=axis))
    nb = np.sqrt(np.sum(bd * bd, axis=axis))
    denom = na * nb + eps
    out = dot / denom

    def backward(g):
        gdot = np.expand_dims(g / denom, axis)
        gden = np.expand_dims(-g * dot / (denom * denom), axis)
        na_e, nb_e = np.expand_dims(na, axis), np.expand_dims(nb, axis)
        ua = np.where(na_e > 0, ad / np.where(na_e > 0, na_e, 1.0), 0.0)
        ub = np.where(nb_e > 0, bd / np.where(nb_e > 0, nb_e, 1.0), 0.0)
        return gdot * bd + gden * nb_e * ua, gdot * ad + gden * na_e * ub

    return _make(out, "cosine", (a, b), backward)


def pairwise_cosine(a, b, eps=COSINE_EPS):
    """All-pairs cosine between rows: (..., n, h) x (..., m, h) -> (..., n, m).

    Leading dimensions broadcast as in matmul.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"pairwise_cosine: shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    dots = np.matmul(ad, np.swapaxes(bd, -1, -2))
    na = np.sqrt(np.sum(ad * ad, axis=-1))
    nb = np.sqrt(np.sum(bd * bd, axis=-1))
    denom = na[..., :, None] * nb[..., None, :] + eps
    out = dots / denom

    def backward(g):
        gdots = g / denom
        gden = -g * out / denom
        gna = np.sum(gden * nb[..., None, :], axis=-1)
        gnb = np.sum(gden * na[..., :, None], axis=-2)
        ua = np.where(na[..., None] > 0, ad / np.where(na > 0, na, 1.0)[..., None], 0.0)
        ub = np.where(nb[..., None] > 0, bd / np.where(nb > 0, nb, 1.0)[..., None], 0.0)
        ga = np.matmul(gdots, bd) + gna[..., None] * ua
        gb = np.matmul(np.swapaxes(gdots, -1, -2), ad) + gnb[..., None] * ub
        return _sum_to(ga, ad.shape), _sum_to(gb, bd.shape)

    return _make(out, "pairwise_cosine", (a, b), backward)


# gradient verification -----------------------------------------------------------


@dataclass
class GradCheckReport:
    step: float
    max_rel_error: dict = field(default_factory=dict)
    analytic: dict = field(default_factory=dict)
    numeric: dict = field(default_factory=dict)

    def passed(self, tol):
        return all(err < tol for err in self.max_rel_error.values())

    @property
    def worst(self):
        return builtins.max(self.max_rel_error.values(), default=0.0)


def relative_error(analytic, numeric, floor=1e-10):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    scale_ = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale_


def grad_check(f, params, h=1e-4, mode="double", floor=1e-10):
    """Compare tape gradients of scalar ``f()`` with central differences.

    ``params`` maps names to the Tensors ``f`` reads; each element is nudged in
    place by +-h and restored afterwards.
    """
    if mode != "double":
        raise ConfigError("gradient checks are only meaningful in double precision")
    if not 1e-6 <= h <= 1e-3:
        raise ConfigError(f"finite-difference step {h} outside [1e-6, 1e-3]")
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ConfigError(f"parameter {name} is not double precision")

    with GradTape() as tape:
        out = f()
    analytic = tape.gradient(out, params)

    report = GradCheckReport(step=h)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        numeric = np.zeros(flat.shape, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
            except NumericError as exc:
                raise NumericError(f"parameter {name}[{i}]: {exc}") from exc
            finally:
                flat[i] = orig
            numeric[i] = (up - down) / (2.0 * h)
        numeric = numeric.reshape(p.shape)
        err = relative_error(analytic[name], numeric, floor)
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
        report.analytic[name] = analytic[name]
        report.numeric[name] = numeric
    return report
