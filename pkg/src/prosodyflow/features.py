"""Pure data transformations applied before the flow sees a track.

Covers frame grouping, centered-difference auxiliary channels, the two
unvoiced-gap fillers (negative log-distance transform and linear
interpolation), continuous-wavelet encode/decode, and the scale conventions
for log-F0 (divide by 6) and energy (diff channel times 10).

Everything here is numpy-only and deterministic; the learned unvoiced-bias
filler lives with the models because it runs on the autodiff tape.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .errors import DataError, ShapeError

F0_DIVISOR = 6.0
ENERGY_DIFF_GAIN = 10.0
DIFF_KAPPA = 2.0

FILLERS = ("distance_transform", "linear_interp", "none")


@dataclass
class PreprocConfig:
    group_size: int = 2
    diff_scale: float = DIFF_KAPPA
    f0_divisor: float = F0_DIVISOR
    energy_diff_gain: float = ENERGY_DIFF_GAIN
    filler: str = "distance_transform"

    def __post_init__(self):
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.filler not in FILLERS:
            raise ValueError(f"filler must be one of {FILLERS}")


# -- grouping -----------------------------------------------------------------


def group(x: np.ndarray, n: int) -> tuple[np.ndarray, int]:
    """Concatenate every n consecutive frames channel-wise.

    x is [T] or [T, D]; returns ([ceil(T/n), n*D], original_length).  When T
    is not divisible by n the final frame is replicated to fill the last
    group.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    t, d = x.shape
    if t == 0:
        raise DataError("cannot group an empty sequence")
    n_groups = -(-t // n)
    pad = n_groups * n - t
    if pad:
        x = np.concatenate([x, np.repeat(x[-1:], pad, axis=0)], axis=0)
    return x.reshape(n_groups, n * d), t


def ungroup(g: np.ndarray, n: int, original_length: int) -> np.ndarray:
    """Exact inverse of group up to the padding truncation."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[1] % n != 0:
        raise ShapeError(f"grouped array width {g.shape} not divisible by {n}")
    d = g.shape[1] // n
    flat = g.reshape(g.shape[0] * n, d)
    if original_length > flat.shape[0]:
        raise ShapeError("original_length exceeds grouped capacity")
    return flat[:original_length]


# -- centered differences -------------------------------------------------------


def centered_diff(x: np.ndarray, kappa: float = DIFF_KAPPA) -> np.ndarray:
    """d[t] = (x[t+1] - x[t-1]) / kappa, one-sided (scaled by 2) at the ends."""
    x = np.asarray(x, dtype=np.float64)
    t = x.shape[0]
    if t < 2:
        raise DataError("centered_diff needs at least 2 frames")
    d = np.empty_like(x)
    d[1:-1] = (x[2:] - x[:-2]) / kappa
    d[0] = 2.0 * (x[1] - x[0]) / kappa
    d[-1] = 2.0 * (x[-1] - x[-2]) / kappa
    return d


# -- unvoiced fillers -----------------------------------------------------------


def distance_fill(f0_log: np.ndarray, voiced: np.ndarray) -> np.ndarray:
    """Replace unvoiced values with -ln(distance to the nearest voiced frame).

    Distance is in frames and >= 1, measured in either direction, so adjacent
    unvoiced frames get 0 and deeper gap interiors go increasingly negative.
    """
    f0_log = np.asarray(f0_log, dtype=np.float64)
    v = np.asarray(voiced).astype(bool)
    t = f0_log.shape[0]
    if v.shape[0] != t:
        raise ShapeError("voiced mask length mismatch")
    if not v.any():
        raise DataError("distance_fill needs at least one voiced frame")
    big = t + 1
    fwd = np.empty(t, dtype=np.int64)
    run = big
    for i in range(t):
        run = 0 if v[i] else min(run + 1, big)
        fwd[i] = run
    bwd = np.empty(t, dtype=np.int64)
    run = big
    for i in range(t - 1, -1, -1):
        run = 0 if v[i] else min(run + 1, big)
        bwd[i] = run
    dist = np.minimum(fwd, bwd)
    out = f0_log.copy()
    unv = ~v
    out[unv] = -np.log(dist[unv].astype(np.float64))
    return out


def linear_interp_fill(f0_log: np.ndarray, voiced: np.ndarray) -> np.ndarray:
    """Linearly interpolate across unvoiced gaps; edge gaps hold the nearest
    voiced value."""
    f0_log = np.asarray(f0_log, dtype=np.float64)
    v = np.asarray(voiced).astype(bool)
    if v.shape[0] != f0_log.shape[0]:
        raise ShapeError("voiced mask length mismatch")
    if not v.any():
        raise DataError("linear_interp_fill needs at least one voiced frame")
    idx = np.flatnonzero(v)
    return np.interp(np.arange(f0_log.shape[0]), idx, f0_log[idx])


# -- scaling ----------------------------------------------------------------------


def scale_f0(f0_hz: np.ndarray, voiced: np.ndarray, filler: str = "distance_transform",
             divisor: float = F0_DIVISOR, kappa: float = DIFF_KAPPA) -> np.ndarray:
    """Build the two F0 channels: scaled main signal and unscaled diff.

    The ln-F0 signal is gap-filled first; the diff channel is the centered
    difference of that unscaled filled signal.  Voiced main values divide by
    ``divisor``.  Distance-filler values stay unscaled (they already sit at or
    below 0, keeping them separable from voiced values, which for 80-800 Hz
    land in [0.73, 1.12] after division); interpolation fill divides
    everywhere since it produces one continuous ln-F0-domain signal.

    Returns [T, 2] channels (main, diff).
    """
    f0_hz = np.asarray(f0_hz, dtype=np.float64)
    v = np.asarray(voiced).astype(bool)
    if filler not in FILLERS:
        raise ValueError(f"unknown filler {filler!r}")
    if np.any(f0_hz[v] <= 0.0):
        raise DataError("voiced frame with non-positive f0")
    ln = np.zeros_like(f0_hz)
    ln[v] = np.log(f0_hz[v])
    if filler == "distance_transform":
        u = distance_fill(ln, v)
        main = np.where(v, u / divisor, u)
    elif filler == "linear_interp":
        u = linear_interp_fill(ln, v)
        main = u / divisor
    else:
        u = ln
        main = np.where(v, u / divisor, 0.0)
    diff = centered_diff(u, kappa)
    return np.stack([main, diff], axis=1)


def descale_f0(main: np.ndarray, voiced: np.ndarray, divisor: float = F0_DIVISOR) -> np.ndarray:
    """Invert the voiced part of scale_f0's main channel back to Hz."""
    main = np.asarray(main, dtype=np.float64)
    v = np.asarray(voiced).astype(bool)
    out = np.zeros_like(main)
    out[v] = np.exp(main[v] * divisor)
    return out


def scale_energy(energy: np.ndarray, kappa: float = DIFF_KAPPA,
                 gain: float = ENERGY_DIFF_GAIN) -> np.ndarray:
    """Energy channels: raw energy plus centered diff scaled by ``gain``.

    Returns [T, 2] channels (energy, gain * diff).
    """
    energy = np.asarray(energy, dtype=np.float64)
    if np.any(energy < 0.0):
        raise DataError("negative energy value")
    return np.stack([energy, gain * centered_diff(energy, kappa)], axis=1)


# -- continuous wavelet transform ---------------------------------------------------

CWT_N_SCALES = 10
CWT_SCALES = tuple(float(2**j) for j in range(CWT_N_SCALES))
_RICKER_C = 2.0 / (math.sqrt(3.0) * math.pi**0.25)


def _ricker_filter(scale: float) -> np.ndarray:
    """Sampled Mexican-hat wavelet at the given scale, L1-normalized by
    1/sqrt(scale), truncated at 5 standard deviations."""
    half = max(int(math.ceil(5.0 * scale)), 3)
    t = np.arange(-half, half + 1, dtype=np.float64)
    r = t / scale
    return _RICKER_C / math.sqrt(scale) * (1.0 - r * r) * np.exp(-0.5 * r * r)


@functools.lru_cache(maxsize=1)
def _reconstruction_weights() -> np.ndarray:
    """Per-scale weights k such that sum_j k_j * (wavelet_j response) is as
    flat as possible over the band of interest.

    Solved once as a least-squares fit of the summed filter frequency
    responses to 1 on a log-spaced grid covering periods from 4 to 1024
    frames.  Log spacing weights every octave equally; fitting past the
    longest signal keeps the response tame where finite-length leakage puts
    energy.  Deterministic; no data involved.
    """
    omegas = 2.0 * math.pi / np.geomspace(1024.0, 4.0, 768)
    h = np.empty((omegas.size, CWT_N_SCALES))
    for j, s in enumerate(CWT_SCALES):
        filt = _ricker_filter(s)
        half = (filt.size - 1) // 2
        n = np.arange(1, half + 1)
        # real even filter: DTFT is h[0] + 2 sum h[n] cos(omega n)
        h[:, j] = filt[half] + 2.0 * np.cos(np.outer(omegas, n)) @ filt[half + 1 :]
    k, *_ = np.linalg.lstsq(h, np.ones(omegas.size), rcond=None)
    return k


def _cwt_matrix(x: np.ndarray) -> np.ndarray:
    """Wavelet responses [T, n_scales] via reflect-padded convolution."""
    t = x.shape[0]
    out = np.empty((t, CWT_N_SCALES))
    for j, s in enumerate(CWT_SCALES):
        filt = _ricker_filter(s)
        half = (filt.size - 1) // 2
        padded = np.pad(x, half, mode="reflect")
        out[:, j] = fftconvolve(padded, filt, mode="valid")
    return out


def cwt_encode(f0_log: np.ndarray, voiced: np.ndarray) -> np.ndarray:
    """12-channel wavelet representation of a gap-filled ln-F0 signal.

    Channels 0-9: Mexican-hat responses at dyadic scales 1..512 of the
    interpolation-filled, standardized signal.  Channels 10 and 11: the
    pre-standardization mean and variance, replicated along time.
    """
    v = np.asarray(voiced).astype(bool)
    if v.sum() < 2:
        raise DataError("cwt_encode needs at least 2 voiced frames")
    filled = linear_interp_fill(f0_log, v)
    mu = float(filled.mean())
    var = float(filled.var())
    if var <= 0.0:
        raise DataError("zero variance after interpolation")
    std = (filled - mu) / math.sqrt(var)
    t = filled.shape[0]
    out = np.empty((t, 12))
    out[:, :CWT_N_SCALES] = _cwt_matrix(std)
    out[:, 10] = mu
    out[:, 11] = var
    return out


def cwt_decode(m: np.ndarray) -> np.ndarray:
    """Approximate inverse of cwt_encode: weighted sum of wavelet channels,
    then de-standardization from the mean/variance channels."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != 12:
        raise DataError(f"cwt_decode expects [T, 12], got {m.shape}")
    var = float(m[:, 11].mean())
    if var <= 0.0:
        raise DataError("non-positive variance channel")
    mu = float(m[:, 10].mean())
    k = _reconstruction_weights()
    recon = m[:, :CWT_N_SCALES] @ k
    return recon * math.sqrt(var) + mu
