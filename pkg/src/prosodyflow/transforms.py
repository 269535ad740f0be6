"""Invertible building blocks with exact log-determinants.

Four transform families: elementwise affine maps, monotone piecewise-quadratic
splines on a bounded interval, 1x1 invertible channel mixes, and time
reversal.  Forward passes run on the autodiff tape and return per-element
log-derivatives; inverses are plain numpy (sampling never needs gradients).

The spline is the integral of a positive piecewise-linear density: raw widths
go through softmax and scale to cover [-B, B]; raw vertex heights go through
softplus (+1e-3 floor) and are normalized so the density integrates to 2B,
which makes uniform raw parameters give exactly the identity map.  Values
outside [-B, B] pass through unchanged with zero log-derivative.
"""

from __future__ import annotations

import math

import numpy as np

from . import engine
from .engine import Tensor
from .errors import NumericError, ParameterizationError, ShapeError, SingularityError

MIN_BIN_WIDTH = 1e-6
VERTEX_FLOOR = 1e-3


# -- channel split ------------------------------------------------------------


def split_channels(n_channels: int) -> tuple[slice, slice]:
    """Contiguous coupling split: transformed half A is the first ceil(C/2)
    channels, conditioning half B the rest."""
    if n_channels < 2:
        raise ShapeError("coupling split needs at least 2 channels")
    n_a = (n_channels + 1) // 2
    return slice(0, n_a), slice(n_a, n_channels)


# -- affine -------------------------------------------------------------------


def affine_couple(x: Tensor, log_scale: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """y = exp(log_scale) * x + bias; returns (y, per-element log-derivative)."""
    y = engine.exp(log_scale) * x + bias
    return y, log_scale


def affine_forward(x, scale, bias) -> tuple[Tensor, Tensor]:
    """y = scale * x + bias with scalar logdet = sum(log scale)."""
    scale = scale if isinstance(scale, Tensor) else Tensor(scale)
    bias = bias if isinstance(bias, Tensor) else Tensor(bias)
    x = x if isinstance(x, Tensor) else Tensor(x)
    if np.any(scale.data <= 0.0):
        raise ParameterizationError("affine scale must be positive")
    y = scale * x + bias
    # logdet sums over transformed elements: broadcast log-scale up to x's shape
    ls = engine.log(scale)
    if ls.shape != x.shape:
        ls = ls + Tensor(np.zeros(x.shape))
    return y, ls.sum()


def affine_inverse(y: np.ndarray, scale: np.ndarray, bias: np.ndarray) -> np.ndarray:
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0.0):
        raise ParameterizationError("affine scale must be positive")
    return (np.asarray(y, dtype=np.float64) - bias) / scale


# -- quadratic spline ---------------------------------------------------------


def _check_raw_shapes(x_shape: tuple, rw_shape: tuple, rv_shape: tuple) -> int:
    if rw_shape[:-1] != x_shape or rv_shape[:-1] != x_shape:
        raise ShapeError("spline raw parameters must have shape x.shape + (bins[+1],)")
    bins = rw_shape[-1]
    if rv_shape[-1] != bins + 1:
        raise ShapeError("raw vertex count must be bins + 1")
    return bins


def _normalize_np(raw_w: np.ndarray, raw_v: np.ndarray, bound: float):
    """Numpy spline normalization: returns (widths, vertices, x_knots, y_knots).

    x_knots/y_knots have bins+1 entries along the last axis, starting at -B.
    """
    two_b = 2.0 * bound
    m = raw_w.max(axis=-1, keepdims=True)
    e = np.exp(raw_w - m)
    widths = e / e.sum(axis=-1, keepdims=True) * two_b
    if widths.min() < MIN_BIN_WIDTH:
        raise ParameterizationError("degenerate spline bin width")
    u = np.logaddexp(0.0, raw_v) + VERTEX_FLOOR
    integral = (widths * 0.5 * (u[..., :-1] + u[..., 1:])).sum(axis=-1, keepdims=True)
    verts = u * (two_b / integral)
    x_knots = np.concatenate(
        [np.full(widths.shape[:-1] + (1,), -bound), np.cumsum(widths, axis=-1) - bound], axis=-1
    )
    areas = widths * 0.5 * (verts[..., :-1] + verts[..., 1:])
    y_knots = np.concatenate(
        [np.full(widths.shape[:-1] + (1,), -bound), np.cumsum(areas, axis=-1) - bound], axis=-1
    )
    return widths, verts, x_knots, y_knots


def spline_couple(x: Tensor, raw_w: Tensor, raw_v: Tensor, bound: float) -> tuple[Tensor, Tensor]:
    """Monotone piecewise-quadratic map of each element of x.

    raw_w: x.shape + (K,) raw bin widths; raw_v: x.shape + (K+1,) raw density
    vertices.  Returns (y, per-element log-derivative); out-of-bound elements
    map to themselves with zero log-derivative.
    """
    bins = _check_raw_shapes(x.shape, raw_w.shape, raw_v.shape)
    two_b = 2.0 * bound

    # widths: softmax (stabilized by a constant shift) scaled to cover [-B, B]
    m = raw_w.data.max(axis=-1, keepdims=True)
    e = engine.exp(raw_w - Tensor(m))
    widths = e / e.sum(axis=-1, keepdims=True) * two_b
    if widths.data.min() < MIN_BIN_WIDTH:
        raise ParameterizationError("degenerate spline bin width")

    # density vertices: positive, normalized to integrate to 2B
    u = engine.softplus(raw_v) + VERTEX_FLOOR
    integral = (widths * ((u[..., :-1] + u[..., 1:]) * 0.5)).sum(axis=-1, keepdims=True)
    verts = u * (two_b / integral)

    x_right = engine.cumsum(widths, axis=-1) - bound
    x_left = engine.concat([Tensor(np.full(x.shape + (1,), -bound)), x_right[..., :-1]], axis=-1)
    areas = widths * ((verts[..., :-1] + verts[..., 1:]) * 0.5)
    y_right = engine.cumsum(areas, axis=-1) - bound
    y_left = engine.concat([Tensor(np.full(x.shape + (1,), -bound)), y_right[..., :-1]], axis=-1)

    # bin assignment from values only (indices are not differentiable); a
    # change of bin between two nearby evaluations is a non-smooth seam, so
    # it participates in kink detection
    idx = (x.data[..., None] > x_left.data).sum(axis=-1) - 1
    idx = np.clip(idx, 0, bins - 1)
    engine.trace_branch(idx)
    inside = np.abs(x.data) <= bound

    xk = engine.gather_last(x_left, idx)
    wk = engine.gather_last(widths, idx)
    yk = engine.gather_last(y_left, idx)
    v_lo = engine.gather_last(verts, idx)
    v_hi = engine.gather_last(verts, np.minimum(idx + 1, bins))

    xi = (x - xk) / wk
    y_in = yk + wk * (v_lo * xi + (v_hi - v_lo) * (xi * xi) * 0.5)
    dens = v_lo + (v_hi - v_lo) * xi
    dens_safe = engine.where(inside, dens, Tensor(np.ones(x.shape)))

    y = engine.where(inside, y_in, x)
    log_deriv = engine.where(inside, engine.log(dens_safe), Tensor(np.zeros(x.shape)))
    return y, log_deriv


def spline_forward(x, raw_w, raw_v, bound: float) -> tuple[Tensor, Tensor]:
    """Contract-level spline: (y, scalar logdet summed over elements)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    raw_w = raw_w if isinstance(raw_w, Tensor) else Tensor(raw_w)
    raw_v = raw_v if isinstance(raw_v, Tensor) else Tensor(raw_v)
    y, ld = spline_couple(x, raw_w, raw_v, bound)
    return y, ld.sum()


def spline_inverse(y, raw_w, raw_v, bound: float) -> np.ndarray:
    """Exact inverse of spline_couple on plain arrays."""
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise NumericError("spline_inverse received non-finite values")
    raw_w = np.asarray(raw_w, dtype=np.float64)
    raw_v = np.asarray(raw_v, dtype=np.float64)
    bins = _check_raw_shapes(y.shape, raw_w.shape, raw_v.shape)
    widths, verts, x_knots, y_knots = _normalize_np(raw_w, raw_v, bound)

    idx = (y[..., None] > y_knots[..., :-1]).sum(axis=-1) - 1
    idx = np.clip(idx, 0, bins - 1)
    inside = np.abs(y) <= bound

    take = lambda arr, i: np.take_along_axis(arr, i[..., None], axis=-1)[..., 0]
    xk = take(x_knots, idx)
    yk = take(y_knots, idx)
    wk = take(widths, idx)
    v_lo = take(verts, idx)
    v_hi = take(verts, np.minimum(idx + 1, bins))

    # solve (dv/2) xi^2 + v_lo xi - d/wk = 0 for xi in [0, 1], stable form
    d = (y - yk) / wk
    a = 0.5 * (v_hi - v_lo)
    disc = v_lo * v_lo + 4.0 * a * d
    disc = np.maximum(disc, 0.0)
    denom = v_lo + np.sqrt(disc)
    xi = np.where(np.abs(denom) > 1e-14, 2.0 * d / np.where(denom == 0.0, 1.0, denom), 0.0)
    x = xk + xi * wk
    return np.where(inside, x, y)


# -- 1x1 invertible convolution ------------------------------------------------


def random_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Random rotation matrix (det +1, logdet 0): Glow-style invconv init."""
    a = rng.normal(size=(dim, dim))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0.0:
        q = q.copy()
        q[:, 0] = -q[:, 0]
    return q


def _check_invertible(w: np.ndarray) -> float:
    sign, ld = np.linalg.slogdet(w)
    if sign == 0.0 or ld < math.log(1e-12):
        raise SingularityError("1x1 convolution weight is singular or near-singular")
    return ld


def invconv_forward(x, weight) -> tuple[Tensor, Tensor]:
    """z[t] = W x[t] per frame; logdet = (number of frames) * log|det W|."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    weight = weight if isinstance(weight, Tensor) else Tensor(weight)
    if weight.data.ndim != 2 or weight.data.shape[0] != weight.data.shape[1]:
        raise ShapeError("invconv weight must be square")
    _check_invertible(weight.data)
    z = engine.linear(x, weight)
    n_frames = int(np.prod(x.shape[:-1])) if x.ndim > 1 else 1
    logdet = engine.logabsdet(weight) * float(n_frames)
    return z, logdet


def invconv_inverse(z, weight: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    _check_invertible(weight)
    return z @ np.linalg.inv(weight).T


# -- time reversal --------------------------------------------------------------


def reverse_time(x):
    """Reverse frame order of a [T, C] sequence; volume-preserving involution."""
    if isinstance(x, Tensor):
        return x[::-1]
    return np.asarray(x)[::-1]
