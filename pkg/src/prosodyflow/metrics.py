"""Evaluation metrics: midi conversion, distribution moments, voicing and F0
errors, and thresholding of sampled contours back into tracks.

All functions are pure numpy and are verified in the tests against
direct-definition oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError

SAMPLE_THRESHOLD = 0.3


def to_midi(f_hz):
    """m = 12 * log2(f / 440) + 69; exact at octaves of 440."""
    f = np.asarray(f_hz, dtype=np.float64)
    if np.any(f <= 0.0):
        raise DataError("to_midi requires positive frequency")
    out = 12.0 * np.log2(f / 440.0) + 69.0
    return float(out) if np.isscalar(f_hz) or out.ndim == 0 else out


def moments(samples: np.ndarray) -> tuple[float, float, float, float]:
    """(mean, population std, skewness, excess kurtosis)."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size < 4:
        raise DataError("moments need at least 4 samples")
    mu = float(x.mean())
    centered = x - mu
    var = float(np.mean(centered**2))
    if var <= 0.0:
        raise DataError("zero variance: skewness and kurtosis undefined")
    std = math.sqrt(var)
    skew = float(np.mean(centered**3)) / std**3
    kurt = float(np.mean(centered**4)) / var**2 - 3.0
    return mu, std, skew, kurt


def vde(pred_mask: np.ndarray, ref_mask: np.ndarray) -> float:
    """Voicing decision error: mean absolute difference of binary masks."""
    p = np.asarray(pred_mask, dtype=np.float64)
    r = np.asarray(ref_mask, dtype=np.float64)
    if p.shape != r.shape:
        raise ShapeError("mask length mismatch")
    return float(np.mean(np.abs(p - r)))


def vfe(pred_f0: np.ndarray, ref_f0: np.ndarray, ref_mask: np.ndarray,
        pred_mask: np.ndarray | None = None) -> tuple[float, int]:
    """Voiced F0 error: MSE in midi over the reference's voiced frames.

    When ``pred_mask`` is given the error is restricted to frames voiced in
    both tracks (sampled tracks have no F0 where they decided unvoiced).
    Returns (mse, frame count used).
    """
    p = np.asarray(pred_f0, dtype=np.float64)
    r = np.asarray(ref_f0, dtype=np.float64)
    m = np.asarray(ref_mask).astype(bool)
    if p.shape != r.shape or m.shape != r.shape:
        raise ShapeError("track length mismatch")
    if pred_mask is not None:
        m = m & np.asarray(pred_mask).astype(bool)
    if not m.any():
        raise DataError("no voiced frames in common")
    diff = to_midi(p[m]) - to_midi(r[m])
    return float(np.mean(diff**2)), int(m.sum())


def enr(pred_e: np.ndarray, ref_e: np.ndarray) -> float:
    """Energy error: full-length MSE."""
    p = np.asarray(pred_e, dtype=np.float64)
    r = np.asarray(ref_e, dtype=np.float64)
    if p.shape != r.shape:
        raise ShapeError("track length mismatch")
    return float(np.mean((p - r) ** 2))


def threshold_sampled_track(main: np.ndarray, threshold: float = SAMPLE_THRESHOLD,
                            divisor: float = 6.0) -> tuple[np.ndarray, np.ndarray]:
    """Split a sampled scaled-ln-F0 channel into (f0_hz, voiced).

    Values at or below the threshold are filler, i.e. unvoiced with f0 = 0;
    the rest invert the scaling back to Hz.  The default 0.3 sits well under
    the voiced floor (ln(80)/6 = 0.73) and well above distance-filler values
    (<= 0).
    """
    main = np.asarray(main, dtype=np.float64)
    voiced = (main > threshold).astype(np.float64)
    f0 = np.where(voiced > 0.0, np.exp(np.clip(main, None, 20.0) * divisor), 0.0)
    return f0, voiced


@dataclass
class MetricReport:
    """Per-comparison metric values with the frame counts that produced them."""

    vde: float
    vfe: float | None
    enr: float
    vfe_frames: int = 0
    n_frames: int = 0
