"""Phoneme-derived conditioning: timed-text context, voiced/unvoiced-aware
merge, a per-frame voicing classifier, and the learned per-phoneme unvoiced
bias head.

The context is a per-frame embedding matrix built by replicating each
phoneme's embedding over its duration.  A voiced-aware merge modulates it
per channel with separate parameters for voiced and unvoiced frames:

    alpha_t = sigmoid(V_t * s_v + (1 - V_t) * s_u)
    beta_t  = tanh(V_t * b_v + (1 - V_t) * b_u)
    merged_t = alpha_t * phi_t + 0.01 * beta_t

At zero parameters that reduces to 0.5 * phi.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Dense, Tensor
from .errors import DataError

CONTEXT_CHANNELS = 512


@dataclass
class PhonemeSeq:
    """Phoneme ids with frame durations; pairs with one track."""

    ids: np.ndarray
    durations: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        if self.ids.shape != self.durations.shape or self.ids.ndim != 1:
            raise DataError("ids and durations must be 1-D and equal length")
        if self.ids.size == 0:
            raise DataError("empty phoneme sequence")
        if np.any(self.durations <= 0):
            raise DataError("phoneme durations must be positive")
        if np.any(self.ids < 0):
            raise DataError("negative phoneme id")

    @property
    def total_frames(self) -> int:
        return int(self.durations.sum())

    def frame_ids(self) -> np.ndarray:
        """Per-frame active phoneme id, [T]."""
        return np.repeat(self.ids, self.durations)


def build_phi_text(seq: PhonemeSeq, table: np.ndarray) -> np.ndarray:
    """Per-frame context matrix [T, C]: row t is the embedding of the phoneme
    active at frame t."""
    table = np.asarray(table, dtype=np.float64)
    if np.any(seq.ids >= table.shape[0]):
        raise DataError("phoneme id outside embedding table")
    return table[seq.frame_ids()]


def apply_unvoiced_bias(f0_log: np.ndarray, seq: PhonemeSeq, voiced: np.ndarray,
                        bias_per_phoneme: np.ndarray) -> np.ndarray:
    """Add each phoneme's non-positive bias to its unvoiced frames only."""
    bias = np.asarray(bias_per_phoneme, dtype=np.float64)
    if np.any(bias > 0.0):
        raise DataError("unvoiced bias must be <= 0")
    v = np.asarray(voiced).astype(bool)
    frames = seq.frame_ids()
    if frames.shape[0] != f0_log.shape[0]:
        raise DataError("phoneme durations do not cover the track")
    out = np.asarray(f0_log, dtype=np.float64).copy()
    out[~v] += bias[frames[~v]]
    return out


class Conditioner:
    """Trainable conditioning stack shared by both flow architectures.

    Holds the embedding table, voiced-merge parameters, the 2-layer voicing
    classifier, and the 2-layer unvoiced-bias head.
    """

    def __init__(self, vocab_size: int, channels: int = CONTEXT_CHANNELS,
                 clf_hidden: int = 64, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng()
        self.vocab_size = vocab_size
        self.channels = channels
        scale = 1.0 / np.sqrt(channels)
        self.embedding = Tensor(rng.normal(0.0, scale, size=(vocab_size, channels)),
                                requires_grad=True)
        self.s_voiced = Tensor(np.zeros(channels), requires_grad=True)
        self.b_voiced = Tensor(np.zeros(channels), requires_grad=True)
        self.s_unvoiced = Tensor(np.zeros(channels), requires_grad=True)
        self.b_unvoiced = Tensor(np.zeros(channels), requires_grad=True)
        self.clf1 = Dense(channels, clf_hidden, activation="tanh", rng=rng)
        self.clf2 = Dense(clf_hidden, 1, rng=rng)
        self.bias1 = Dense(channels, clf_hidden, activation="tanh", rng=rng)
        self.bias2 = Dense(clf_hidden, 1, rng=rng)

    # -- context -----------------------------------------------------------

    def phi_frames(self, frame_ids: np.ndarray) -> Tensor:
        """Embeddings for per-frame phoneme ids of any shape, appending C."""
        frame_ids = np.asarray(frame_ids, dtype=np.int64)
        if np.any(frame_ids >= self.vocab_size) or np.any(frame_ids < 0):
            raise DataError("phoneme id outside embedding table")
        flat = engine.take_rows(self.embedding, frame_ids.reshape(-1))
        return flat.reshape(frame_ids.shape + (self.channels,))

    def voiced_merge(self, phi: Tensor, voiced: np.ndarray) -> Tensor:
        """Voiced-aware affine modulation of the context, [..., T, C]."""
        v = Tensor(np.asarray(voiced, dtype=np.float64)[..., None])
        one_minus = Tensor(1.0 - v.data)
        alpha = engine.sigmoid(v * self.s_voiced + one_minus * self.s_unvoiced)
        beta = engine.tanh(v * self.b_voiced + one_minus * self.b_unvoiced)
        return alpha * phi + beta * 0.01

    # -- voicing classifier --------------------------------------------------

    def classifier_logits(self, phi: Tensor) -> Tensor:
        """Per-frame voicing logit, [...] matching phi's leading dims."""
        out = self.clf2(self.clf1(phi))
        return out.reshape(out.shape[:-1])

    def classifier_bce(self, logits: Tensor, voiced: np.ndarray,
                       mask: np.ndarray | None = None) -> Tensor:
        """Binary cross-entropy with logits, averaged over valid frames."""
        t = np.asarray(voiced, dtype=np.float64)
        per = engine.softplus(logits) - logits * Tensor(t)
        if mask is None:
            return per.mean()
        m = np.asarray(mask, dtype=np.float64)
        return (per * Tensor(m)).sum() / float(m.sum())

    def predict_voiced(self, frame_ids: np.ndarray) -> np.ndarray:
        """Thresholded voicing decision from phonemes alone; ties go voiced."""
        with engine.no_grad():
            logits = self.classifier_logits(self.phi_frames(frame_ids))
        return (logits.data >= 0.0).astype(np.float64)

    # -- unvoiced bias ---------------------------------------------------------

    def phoneme_bias(self) -> Tensor:
        """Non-positive bias per vocabulary entry, [vocab]."""
        raw = self.bias2(self.bias1(self.embedding))
        return -engine.relu(raw).reshape(-1)

    def parameters(self, prefix: str = "ctx") -> dict[str, Tensor]:
        params = {
            f"{prefix}.embedding": self.embedding,
            f"{prefix}.s_voiced": self.s_voiced,
            f"{prefix}.b_voiced": self.b_voiced,
            f"{prefix}.s_unvoiced": self.s_unvoiced,
            f"{prefix}.b_unvoiced": self.b_unvoiced,
        }
        params.update(self.clf1.parameters(f"{prefix}.clf1"))
        params.update(self.clf2.parameters(f"{prefix}.clf2"))
        params.update(self.bias1.parameters(f"{prefix}.bias1"))
        params.update(self.bias2.parameters(f"{prefix}.bias2"))
        return params
