"""Reverse-mode automatic differentiation over float64 numpy arrays.

A ``Tensor`` wraps an ndarray and records the operations applied to it on a
tape (the graph of parent links).  Calling ``backward()`` on a scalar result
walks the tape once in reverse topological order and accumulates gradients
into every tensor created with ``requires_grad=True``.  Gradients accumulate
across calls until ``zero_grad`` resets them, so parameter tensors behave the
way optimizers expect.

Two fused primitives, ``linear`` and ``lstm_scan``, do the heavy lifting for
dense and recurrent layers; everything else is small elementwise or shape ops.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import NumericError, ShapeError

_GRAD_ENABLED = True
_KINK_TRACE: list | None = None


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (sampling and evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def kink_trace():
    """Record every branch decision (relu signs, where masks, traced index
    selections) evaluated inside the block.

    The gradient checker runs the loss twice under this trace; a coordinate
    whose two branch patterns differ sits on a non-smooth point and a central
    difference there is meaningless, so it is skipped.
    """
    global _KINK_TRACE
    prev = _KINK_TRACE
    _KINK_TRACE = []
    try:
        yield _KINK_TRACE
    finally:
        _KINK_TRACE = prev


def trace_branch(decision: np.ndarray) -> None:
    """Record a data-dependent discrete choice (e.g. which piece of a
    piecewise map each element landed in) for kink detection."""
    if _KINK_TRACE is not None:
        _KINK_TRACE.append(np.asarray(decision).copy())


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Array node on the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor created from non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None

    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple, backward) -> "Tensor":
        """Internal constructor for op outputs; skips validation and copying."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic protocol ----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor._make(self.data, (), None)

    # -- autodiff ----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into all requires_grad leaves."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar tensor")
        if not np.isfinite(self.data):
            raise NumericError("backward() called on a non-finite scalar")
        order = self._topo_order()
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    # leaf: accumulate persistently
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += pg
                else:
                    acc = grads.get(id(parent))
                    if acc is None:
                        grads[id(parent)] = np.array(pg, dtype=np.float64, copy=True)
                    else:
                        acc += pg

    def _topo_order(self) -> list:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return order

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(x, dtype=np.float64)
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._backward = None
    return t


# -- elementwise ops ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return Tensor._make(out, (a, b), bw)


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    exponent = float(exponent)
    out = a.data**exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return Tensor._make(out, (a,), bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise NumericError("log of non-positive value")
    out = np.log(a.data)
    return Tensor._make(out, (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = expit(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0
    if _KINK_TRACE is not None:
        _KINK_TRACE.append(mask)
    return Tensor._make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return Tensor._make(out, (a,), lambda g: (g * expit(a.data),))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select; ``cond`` is a plain boolean array, not on the tape."""
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    if _KINK_TRACE is not None:
        # a selection flip between two finite-difference evaluations marks a
        # non-smooth point, same as a relu sign change
        _KINK_TRACE.append(cond)
    out = np.where(cond, a.data, b.data)

    def bw(g):
        ga = _unbroadcast(np.where(cond, g, 0.0), a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, 0.0, g), b.data.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), bw)


# -- reductions and shape ops -------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape),)

    return Tensor._make(np.asarray(out), (a,), bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size // max(np.asarray(out).size, 1)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / n,)

    return Tensor._make(np.asarray(out), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.data.shape),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(out, tuple(tensors), bw)


def take_slice(a, key) -> Tensor:
    a = _as_tensor(a)
    out = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return Tensor._make(np.array(out, copy=True), (a,), bw)


def take_rows(a, idx: np.ndarray) -> Tensor:
    """Row lookup ``a[idx]`` along axis 0; rows may repeat (embedding gather)."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(out, (a,), bw)


def gather_last(a, idx: np.ndarray) -> Tensor:
    """``out[..., ] = a[..., idx[...]]``: pick one entry along the last axis."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.data.shape[:-1]:
        raise ShapeError("gather_last index shape must match leading dims")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return Tensor._make(out, (a,), bw)


def gather_time(a, idx: np.ndarray) -> Tensor:
    """``out[b, t, ...] = a[b, idx[b, t], ...]``: per-row time reindexing.

    Indices may repeat, so the backward pass scatter-adds.
    """
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.data.shape[:2]:
        raise ShapeError("gather_time expects idx of shape batch x time")
    rows = np.arange(a.data.shape[0])[:, None]
    out = a.data[rows, idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return Tensor._make(out, (a,), bw)


def cumsum(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    out = np.cumsum(a.data, axis=axis)

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return Tensor._make(out, (a,), bw)


def reverse_padded(a, lengths: np.ndarray | None = None) -> Tensor:
    """Reverse the time axis (axis 1 of a [B, T, ...] tensor).

    With ``lengths`` given, row b reverses only its first ``lengths[b]``
    frames and leaves padding in place, so padded batches stay aligned.
    The op is its own inverse for fixed lengths.
    """
    a = _as_tensor(a)
    if a.data.ndim < 2:
        raise ShapeError("reverse_padded expects at least 2 dims (batch, time)")
    B, T = a.data.shape[0], a.data.shape[1]
    if lengths is None:
        idx = np.broadcast_to(np.arange(T - 1, -1, -1), (B, T))
    else:
        lengths = np.asarray(lengths, dtype=np.int64)
        ar = np.arange(T)
        idx = np.where(ar[None, :] < lengths[:, None], lengths[:, None] - 1 - ar[None, :], ar[None, :])
    rows = np.arange(B)[:, None]
    out = a.data[rows, idx]

    def bw(g):
        # the index map is a permutation per row, so gather by the same map
        return (g[rows, idx],)

    return Tensor._make(out, (a,), bw)


# -- fused layers -------------------------------------------------------------


def linear(x, weight, bias=None) -> Tensor:
    """``y = x @ weight.T + bias`` over the last axis of ``x``.

    ``weight`` is [out, in]; any number of leading dims on ``x``.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.shape[-1] != weight.data.shape[1]:
        raise ShapeError(
            f"linear: input features {x.data.shape[-1]} != weight in-size {weight.data.shape[1]}"
        )
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    out2 = x2 @ weight.data.T
    if bias is not None:
        bias = _as_tensor(bias)
        out2 = out2 + bias.data
    out = out2.reshape(*lead, weight.data.shape[0])

    if bias is None:

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            gx = (g2 @ weight.data).reshape(x.data.shape) if x.requires_grad else None
            gw = g2.T @ x2 if weight.requires_grad else None
            return gx, gw

        return Tensor._make(out, (x, weight), bw)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data).reshape(x.data.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor._make(out, (x, weight, bias), bw)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul supports 2-D operands")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), bw)


def logabsdet(w) -> Tensor:
    """log |det W| for a square matrix; gradient is inv(W).T."""
    w = _as_tensor(w)
    sign, ld = np.linalg.slogdet(w.data)
    if sign == 0.0 or not np.isfinite(ld):
        raise NumericError("logabsdet of a singular matrix")
    w_inv_t = np.linalg.inv(w.data).T

    def bw(g):
        return (g * w_inv_t,)

    return Tensor._make(np.asarray(ld), (w,), bw)


def lstm_scan(x, weight, bias, h0=None, c0=None) -> Tensor:
    """Run an LSTM over [B, T, in] inputs; returns hidden states [B, T, H].

    ``weight`` is [4H, in+H] with gate rows ordered (input, forget, output,
    cell); ``bias`` is [4H].  The backward pass is a hand-rolled BPTT that
    batches all weight gradients into two matmuls after the time loop.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 3:
        raise ShapeError("lstm_scan expects [batch, time, features] input")
    B, T, I = x.data.shape
    H4, IH = weight.data.shape
    H = H4 // 4
    if H4 != 4 * H or IH != I + H:
        raise ShapeError(f"lstm weight shape {weight.data.shape} incompatible with input {I}")
    Wx = weight.data[:, :I]
    Wh = weight.data[:, I:]
    h = np.zeros((B, H)) if h0 is None else np.array(h0, dtype=np.float64)
    c = np.zeros((B, H)) if c0 is None else np.array(c0, dtype=np.float64)

    xp = (x.data.reshape(B * T, I) @ Wx.T + bias.data).reshape(B, T, H4)
    outs = np.empty((B, T, H))
    S = np.empty((T, B, 3 * H))  # input, forget, output gates after sigmoid
    G = np.empty((T, B, H))  # cell candidate after tanh
    TC = np.empty((T, B, H))  # tanh of cell state
    CP = np.empty((T, B, H))  # previous cell state
    h_prev = np.empty((T, B, H))
    for t in range(T):
        z = xp[:, t] + h @ Wh.T
        s = expit(z[:, : 3 * H])
        g = np.tanh(z[:, 3 * H :])
        h_prev[t] = h
        CP[t] = c
        c = s[:, H : 2 * H] * c + s[:, :H] * g
        tc = np.tanh(c)
        h = s[:, 2 * H :] * tc
        S[t], G[t], TC[t] = s, g, tc
        outs[:, t] = h

    needs_x = x.requires_grad
    needs_w = weight.requires_grad or bias.requires_grad

    def bw(g_out):
        SD = S * (1.0 - S)
        GD = 1.0 - G * G
        TD = 1.0 - TC * TC
        dz = np.empty((T, B, H4))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh = g_out[:, t] + dh_next
            o = S[t, :, 2 * H :]
            do = dh * TC[t]
            dc = dc_next + dh * o * TD[t]
            dz[t, :, :H] = dc * G[t]
            dz[t, :, H : 2 * H] = dc * CP[t]
            dz[t, :, 2 * H : 3 * H] = do
            dz[t, :, 3 * H :] = dc * S[t, :, :H]
            dz[t, :, : 3 * H] *= SD[t]
            dz[t, :, 3 * H :] *= GD[t]
            dh_next = dz[t] @ Wh
            dc_next = dc * S[t, :, H : 2 * H]
        dz2 = dz.transpose(1, 0, 2).reshape(B * T, H4)
        gx = (dz2 @ Wx).reshape(B, T, I) if needs_x else None
        if needs_w:
            dWx = dz.reshape(T * B, H4).T @ np.concatenate(
                [x.data.transpose(1, 0, 2).reshape(T * B, I), h_prev.reshape(T * B, H)], axis=1
            )
            gw = dWx
            gb = dz2.sum(axis=0)
        else:
            gw = gb = None
        return gx, gw, gb

    return Tensor._make(outs, (x, weight, bias), bw)


# -- layers -------------------------------------------------------------------

_ACTIVATIONS = {"identity": None, "tanh": tanh, "relu": relu, "sigmoid": sigmoid}


class Dense:
    """Fully connected layer with uniform +-sqrt(1/fan_in) init.

    ``zero_init=True`` zeroes weight and bias so the layer starts as the
    constant-zero map; flow predictors use this to begin at the identity.
    """

    def __init__(self, in_size: int, out_size: int, activation: str = "identity",
                 rng: np.random.Generator | None = None, zero_init: bool = False):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_size = in_size
        self.out_size = out_size
        self.activation = activation
        if zero_init:
            w = np.zeros((out_size, in_size))
        else:
            rng = rng or np.random.default_rng()
            bound = math.sqrt(1.0 / in_size)
            w = rng.uniform(-bound, bound, size=(out_size, in_size))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_size), requires_grad=True)

    def __call__(self, x) -> Tensor:
        x = _as_tensor(x)
        if not np.all(np.isfinite(x.data)):
            raise NumericError("dense layer received non-finite input")
        y = linear(x, self.weight, self.bias)
        act = _ACTIVATIONS[self.activation]
        return y if act is None else act(y)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class LSTM:
    """Single-layer LSTM; weights packed [4H, in+H], forget bias starts at 1."""

    def __init__(self, in_size: int, hidden: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng()
        bound = math.sqrt(1.0 / (in_size + hidden))
        w = rng.uniform(-bound, bound, size=(4 * hidden, in_size + hidden))
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = 1.0
        self.in_size = in_size
        self.hidden = hidden
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x, h0=None, c0=None) -> Tensor:
        return lstm_scan(x, self.weight, self.bias, h0=h0, c0=c0)

    def step(self, x_t: np.ndarray, h: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """One untaped cell step on plain arrays (sequential inversion path)."""
        H = self.hidden
        z = np.concatenate([x_t, h], axis=-1) @ self.weight.data.T + self.bias.data
        s = expit(z[..., : 3 * H])
        g = np.tanh(z[..., 3 * H :])
        c_new = s[..., H : 2 * H] * c + s[..., :H] * g
        h_new = s[..., 2 * H :] * np.tanh(c_new)
        return h_new, c_new

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adam with bias correction; state survives checkpoint round-trips."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = 0.0
            elif not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "m": {k: arr.tolist() for k, arr in self.m.items()},
            "v": {k: arr.tolist() for k, arr in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        for k in self.params:
            self.m[k] = np.array(state["m"][k], dtype=np.float64).reshape(self.m[k].shape)
            self.v[k] = np.array(state["v"][k], dtype=np.float64).reshape(self.v[k].shape)


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# -- gradient checking --------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)
    checked: int = 0
    skipped_kinks: int = 0

    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]


def grad_check(fn, params: dict[str, Tensor], eps: float = 1e-6,
               max_coords: int | None = None,
               rng: np.random.Generator | None = None,
               richardson: bool = False, floor: float = 1e-12) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn()`` against central differences.

    ``fn`` must be deterministic and depend on ``params`` only through their
    ``.data``.  Coordinates that flip a relu sign or a branch selection
    between the perturbed evaluations are skipped (the kink makes the finite
    difference invalid).  With ``richardson`` a second central difference at
    ``eps/2`` is combined as (4*D(eps/2) - D(eps))/3, cancelling the leading
    truncation term; pair it with a larger ``eps`` (around 1e-3) so that
    roundoff in the objective cannot swamp small gradient entries.
    Relative error uses max(|analytic|, |numeric|, ``floor``) as denominator;
    raise ``floor`` above the finite-difference noise level (about
    machine-eps * |objective| / eps) when the objective has coordinates whose
    true gradient sits below that noise, where a pure relative error is
    meaningless.  The floor never hides a real defect on coordinates whose
    gradient magnitude matters: their absolute disagreement dwarfs any
    reasonable floor.
    """
    for p in params.values():
        p.grad = None
    loss = fn()
    if not np.isfinite(loss.data):
        raise NumericError("grad_check objective is non-finite")
    loss.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for k, p in params.items()}

    def central(flat, i, orig, h):
        flat[i] = orig + h
        with kink_trace() as trace_hi:
            f_hi = float(fn().data)
        flat[i] = orig - h
        with kink_trace() as trace_lo:
            f_lo = float(fn().data)
        flat[i] = orig
        same_branch = len(trace_hi) == len(trace_lo) and all(
            np.array_equal(a, b) for a, b in zip(trace_hi, trace_lo)
        )
        return (f_hi - f_lo) / (2.0 * h), same_branch

    report = GradCheckReport(max_rel_err=0.0)
    rng = rng or np.random.default_rng(0)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = np.arange(n)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            numeric, ok = central(flat, i, orig, eps)
            if ok and richardson:
                half, ok = central(flat, i, orig, eps / 2.0)
                numeric = (4.0 * half - numeric) / 3.0
            if not ok:
                report.skipped_kinks += 1
                continue
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, rel)
            report.checked += 1
        report.per_param[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report


# -- checkpoint serialization -------------------------------------------------

CHECKPOINT_FORMAT = "prosodyflow-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor], extra: dict | None = None) -> None:
    """Write parameters (and optional extra state) as versioned JSON.

    Values are serialized through repr-style float formatting, which
    round-trips float64 exactly, so save/load is bit-identical.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "params": {
            name: {"shape": list(p.data.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in params.items()
        },
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> dict:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise NumericError(f"not a checkpoint file: {path}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise NumericError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


def restore_params(params: dict[str, Tensor], payload: dict) -> None:
    """Load checkpoint values into an existing parameter dict, in place."""
    stored = payload["params"]
    missing = set(params) - set(stored)
    unexpected = set(stored) - set(params)
    if missing or unexpected:
        raise ShapeError(
            f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}"
        )
    for name, p in params.items():
        rec = stored[name]
        arr = np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
        if arr.shape != p.data.shape:
            raise ShapeError(f"parameter {name!r}: checkpoint shape {arr.shape} != {p.data.shape}")
        p.data = arr
