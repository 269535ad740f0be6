"""Normalizing-flow toolkit for prosody time series.

Models low-dimensional frame-level contours (F0 with voiced/unvoiced
structure, frame energy) with exact-likelihood normalizing flows: a bipartite
coupling architecture and an autoregressive one, both available with affine
or monotone quadratic-spline transforms, conditioned on phoneme-derived
context.
"""

__version__ = "0.1.0"
