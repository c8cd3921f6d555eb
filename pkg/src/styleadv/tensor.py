"""Dense float64 tensors with a reverse-mode differentiation tape.

Every differentiable operation goes through :func:`apply_primitive`. A node is
recorded only when at least one input requires gradients and recording is
enabled (see :func:`no_grad`). Node ids are issued from a per-thread counter,
so sorting reachable nodes by id gives a valid topological order.
"""
from __future__ import annotations

import itertools
import threading
from collections.abc import Mapping
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DomainError, NumericsError, ShapeError

__all__ = [
    "Tensor", "Grads", "FDReport", "apply_primitive", "backward", "no_grad",
    "tape_nodes", "finite_difference_check", "as_tensor", "PRIMITIVES",
    "add", "sub", "mul", "div", "matmul", "conv2d", "relu", "avgpool2d",
    "global_avgpool", "reshape", "transpose", "slice_axis", "concat",
    "reduce_sum", "reduce_mean", "reduce_var", "sqrt", "log", "exp",
    "softmax", "log_softmax", "sign", "scale",
]


class _TapeState(threading.local):
    def __init__(self):
        self.ids = itertools.count()
        self.enabled = True


_state = _TapeState()


@contextmanager
def no_grad():
    """Disable node recording on this thread for the duration of the block."""
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node(NamedTuple):
    kind: str
    inputs: tuple
    vjp: Callable


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "_node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_state.ids)
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def kind(self):
        return self._node.kind if self._node is not None else "leaf"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

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

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitive rules: each returns (forward value, vjp) where vjp(g) yields one
# gradient (or None) per input


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _p_add(a, b):
    _broadcast_check("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _p_sub(a, b):
    _broadcast_check("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _p_mul(a, b):
    _broadcast_check("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _p_div(a, b):
    _broadcast_check("div", a, b)
    if np.any(b == 0):
        raise DomainError("div: zero divisor")
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


def _p_matmul(a, b, needs=(True, True)):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b, lambda g: (g @ b.T if needs[0] else None, a.T @ g if needs[1] else None)


def _p_conv2d(x, w, b=None, padding=0, needs=(True, True, True)):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected rank-4 input and weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({w.shape[0]},)")
    p = int(padding)
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Hp, Wp = H + 2 * p, W + 2 * p
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    # channels-last im2col: rows are output pixels, columns ordered (kh, kw, C)
    xp = np.zeros((B, Hp, Wp, C))
    xp[:, p:p + H, p:p + W, :] = x.transpose(0, 2, 3, 1)
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C)
    wm = w.transpose(0, 2, 3, 1).reshape(O, -1)
    out = cols @ wm.T
    if b is not None:
        out += b
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, O)
        gw = None
        if needs[1]:
            gw = np.ascontiguousarray((g2.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2))
        dx = None
        if needs[0]:
            wt = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
            dxp = np.zeros((B, Hp, Wp, C))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + Ho, j:j + Wo, :] += (g2 @ wt[i, j]).reshape(B, Ho, Wo, C)
            dx = np.ascontiguousarray(dxp[:, p:p + H, p:p + W, :].transpose(0, 3, 1, 2))
        if b is None:
            return dx, gw
        return dx, gw, g2.sum(axis=0) if needs[2] else None

    return out, vjp


def _p_relu(x):
    return np.maximum(x, 0.0), lambda g: (g * (x > 0),)


def _p_avgpool2d(x, size=2):
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d: expected rank 4, got {x.shape}")
    B, C, H, W = x.shape
    s = int(size)
    if H % s or W % s:
        raise ShapeError(f"avgpool2d: {H}x{W} not divisible by {s}")
    out = np.zeros((B, C, H // s, W // s))
    for i in range(s):
        for j in range(s):
            out += x[:, :, i::s, j::s]
    out /= s * s

    def vjp(g):
        gs = g / (s * s)
        dx = np.empty_like(x)
        for i in range(s):
            for j in range(s):
                dx[:, :, i::s, j::s] = gs
        return (dx,)

    return out, vjp


def _p_global_avgpool(x):
    if x.ndim != 4:
        raise ShapeError(f"global-avgpool: expected rank 4, got {x.shape}")
    B, C, H, W = x.shape
    return x.mean(axis=(2, 3)), lambda g: (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape),)


def _p_reshape(x, shape=()):
    shape = tuple(int(s) for s in shape)
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return out, lambda g: (g.reshape(x.shape),)


def _p_transpose(x, axes=None):
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return np.ascontiguousarray(x.transpose(axes)), lambda g: (g.transpose(inverse),)


def _p_slice(x, axis=0, start=None, stop=None):
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"slice: axis {axis} out of range for rank {x.ndim}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def vjp(g):
        out = np.zeros_like(x)
        out[index] = g
        return (out,)

    return x[index], vjp


def _p_concat(*xs, axis=0):
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return out, vjp


def _norm_axes(x, axis):
    if axis is None:
        return tuple(range(x.ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % x.ndim for a in axis)


def _expand(g, x, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, x.shape)


def _p_reduce_sum(x, axis=None, keepdims=False):
    axes = _norm_axes(x, axis)
    return x.sum(axis=axes, keepdims=keepdims), lambda g: (_expand(g, x, axes, keepdims),)


def _p_reduce_mean(x, axis=None, keepdims=False):
    axes = _norm_axes(x, axis)
    n = int(np.prod([x.shape[a] for a in axes]))
    return x.mean(axis=axes, keepdims=keepdims), lambda g: (_expand(g, x, axes, keepdims) / n,)


def _p_reduce_var(x, axis=None, keepdims=False):
    # population convention (divide by n)
    axes = _norm_axes(x, axis)
    n = int(np.prod([x.shape[a] for a in axes]))
    centered = x - x.mean(axis=axes, keepdims=True)
    out = (centered * centered).mean(axis=axes, keepdims=keepdims)
    return out, lambda g: (_expand(g, x, axes, keepdims) * (2.0 / n) * centered,)


def _p_sqrt(x):
    if np.any(x < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(x)

    def vjp(g):
        with np.errstate(divide="ignore"):   # infinite slope at 0
            return (g * 0.5 / out,)
    return out, vjp


def _p_log(x):
    if np.any(x <= 0):
        raise DomainError("log of a non-positive value")
    return np.log(x), lambda g: (g / x,)


def _p_exp(x):
    out = np.exp(x)
    return out, lambda g: (g * out,)


def _p_softmax(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)
    return out, lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _p_log_softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    prob = np.exp(out)
    return out, lambda g: (g - prob * g.sum(axis=-1, keepdims=True),)


def _p_scale(x, factor=1.0):
    c = float(factor)
    return x * c, lambda g: (g * c,)


PRIMITIVES = {
    "add": _p_add,
    "sub": _p_sub,
    "mul": _p_mul,
    "div": _p_div,
    "matmul": _p_matmul,
    "conv2d": _p_conv2d,
    "relu": _p_relu,
    "avgpool2d": _p_avgpool2d,
    "global-avgpool": _p_global_avgpool,
    "reshape": _p_reshape,
    "transpose": _p_transpose,
    "slice": _p_slice,
    "concat": _p_concat,
    "reduce-sum": _p_reduce_sum,
    "reduce-mean": _p_reduce_mean,
    "reduce-var": _p_reduce_var,
    "sqrt": _p_sqrt,
    "log": _p_log,
    "exp": _p_exp,
    "softmax": _p_softmax,
    "log-softmax": _p_log_softmax,
    "scalar-scale": _p_scale,
}


_NEEDS_AWARE = {"conv2d", "matmul"}


def apply_primitive(kind, inputs, **attrs):
    """Evaluate primitive ``kind`` on ``inputs`` and record it when needed.

    ``sign`` is accepted here too but is forward-only and never recorded.
    """
    inputs = tuple(as_tensor(t) for t in inputs)
    if kind == "sign":
        return Tensor(np.sign(inputs[0].data))
    try:
        rule = PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    if kind in _NEEDS_AWARE:
        attrs["needs"] = tuple(t.requires_grad for t in inputs) + (False,) * (3 - len(inputs))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out, vjp = rule(*(t.data for t in inputs), **attrs)
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericsError(f"{kind}: non-finite output")
    record = _state.enabled and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=record)
    if record:
        result._node = Node(kind, inputs, vjp)
    return result


class Grads(Mapping):
    """Gradient table keyed by tensor identity."""

    def __init__(self):
        self._by_id = {}
        self._tensors = {}

    def _put(self, tensor, value):
        self._by_id[tensor.node_id] = value
        self._tensors[tensor.node_id] = tensor

    def __getitem__(self, tensor):
        try:
            return self._by_id[tensor.node_id]
        except (KeyError, AttributeError):
            raise KeyError(tensor) from None

    def __contains__(self, tensor):
        return getattr(tensor, "node_id", None) in self._by_id

    def __iter__(self):
        return iter(self._tensors.values())

    def __len__(self):
        return len(self._by_id)


def _reachable(loss):
    seen = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in seen or not t.requires_grad:
            continue
        seen[t.node_id] = t
        if t._node is not None:
            stack.extend(t._node.inputs)
    return sorted(seen.values(), key=lambda t: t.node_id, reverse=True)


def tape_nodes(loss):
    """Ordered record (node_id, kind, input ids) of the nodes ``loss`` depends on."""
    return [(t.node_id, t.kind, tuple(i.node_id for i in t._node.inputs) if t._node else ())
            for t in reversed(_reachable(loss))]


def backward(loss):
    """Propagate d(loss)/d(node) to every reachable node that requires gradients."""
    loss = as_tensor(loss)
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = Grads()
    if not loss.requires_grad:
        return grads
    pending = {loss.node_id: np.ones_like(loss.data)}
    for t in _reachable(loss):
        g = pending.pop(t.node_id, None)
        if g is None:
            continue
        grads._put(t, g)
        if t._node is None:
            continue
        for inp, gi in zip(t._node.inputs, t._node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = pending.get(inp.node_id)
            pending[inp.node_id] = gi if prev is None else prev + gi
    return grads


# ---------------------------------------------------------------------------
# functional surface


def add(a, b):
    return apply_primitive("add", (a, b))


def sub(a, b):
    return apply_primitive("sub", (a, b))


def mul(a, b):
    return apply_primitive("mul", (a, b))


def div(a, b):
    return apply_primitive("div", (a, b))


def matmul(a, b):
    return apply_primitive("matmul", (a, b))


def conv2d(x, w, b=None, padding=0):
    inputs = (x, w) if b is None else (x, w, b)
    return apply_primitive("conv2d", inputs, padding=padding)


def relu(x):
    return apply_primitive("relu", (x,))


def avgpool2d(x, size=2):
    return apply_primitive("avgpool2d", (x,), size=size)


def global_avgpool(x):
    return apply_primitive("global-avgpool", (x,))


def reshape(x, shape):
    return apply_primitive("reshape", (x,), shape=shape)


def transpose(x, axes=None):
    return apply_primitive("transpose", (x,), axes=axes)


def slice_axis(x, axis, start, stop):
    return apply_primitive("slice", (x,), axis=axis, start=start, stop=stop)


def concat(xs, axis=0):
    return apply_primitive("concat", tuple(xs), axis=axis)


def reduce_sum(x, axis=None, keepdims=False):
    return apply_primitive("reduce-sum", (x,), axis=axis, keepdims=keepdims)


def reduce_mean(x, axis=None, keepdims=False):
    return apply_primitive("reduce-mean", (x,), axis=axis, keepdims=keepdims)


def reduce_var(x, axis=None, keepdims=False):
    return apply_primitive("reduce-var", (x,), axis=axis, keepdims=keepdims)


def sqrt(x):
    return apply_primitive("sqrt", (x,))


def log(x):
    return apply_primitive("log", (x,))


def exp(x):
    return apply_primitive("exp", (x,))


def softmax(x):
    return apply_primitive("softmax", (x,))


def log_softmax(x):
    return apply_primitive("log-softmax", (x,))


def sign(x):
    return apply_primitive("sign", (x,))


def scale(x, factor):
    return apply_primitive("scalar-scale", (x,), factor=factor)


# ---------------------------------------------------------------------------
# gradient oracle


@dataclass
class FDReport:
    max_rel_error: float
    tol: float
    tape_grad: np.ndarray = field(repr=False)
    numeric_grad: np.ndarray = field(repr=False)
    coords: np.ndarray = field(repr=False)

    @property
    def passed(self):
        return self.max_rel_error <= self.tol


def _probe(f, flat, shape):
    try:
        return float(as_tensor(f(Tensor(flat.reshape(shape)))).data.reshape(-1)[0])
    except NumericsError:
        return float("nan")


def finite_difference_check(f, x, h=1e-4, tol=1e-5, coords=None):
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    ``coords`` optionally restricts the probe to a subset of flat indices
    (large parameter tensors). The error per coordinate is
    ``|a - b| / max(1, |a|, |b|)``.
    """
    base = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    loss = f(xt)
    grads = backward(loss)
    tape = grads[xt].reshape(-1) if xt in grads else np.zeros(base.size)
    idx = np.arange(base.size) if coords is None else np.asarray(coords, dtype=np.int64).reshape(-1)
    numeric = np.empty(idx.size)
    flat = base.reshape(-1)
    with no_grad():
        for n, i in enumerate(idx):
            probe = flat.copy()
            probe[i] += h
            hi = _probe(f, probe, base.shape)
            probe[i] -= 2 * h
            lo = _probe(f, probe, base.shape)
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise DomainError(f"f is non-finite near coordinate {i}")
            numeric[n] = (hi - lo) / (2 * h)
    a = tape[idx]
    err = np.abs(a - numeric) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
    return FDReport(float(err.max(initial=0.0)), tol, a, numeric, idx)
