"""Synthetic prosody corpus generator.

Each utterance is a sequence of alternating voiced/unvoiced runs with
geometric lengths.  Voiced frames carry an F0 contour built in the log
domain from a per-utterance base value plus slow drift, vibrato and a
little noise; frame energy follows a slowly mixing AR(1) in the log domain
and is attenuated on unvoiced frames.  Every run gets a single phoneme id,
drawn from disjoint pools so that some ids are always voiced and others
always unvoiced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .conditioning import PhonemeSeq
from .errors import DataError
from .fileio import SequenceTrack
from .metrics import moments, to_midi


@dataclass
class SynthConfig:
    seed: int
    n_utterances: int = 200
    min_frames: int = 150
    max_frames: int = 300
    voiced_run_mean: float = 25.0
    unvoiced_run_mean: float = 8.0
    f0_base_low: float = 110.0
    f0_base_high: float = 280.0
    drift_amp: float = 0.08
    vibrato_amp: float = 0.03
    vibrato_hz: float = 5.5
    noise_level: float = 0.008
    f0_floor: float = 80.0
    f0_ceil: float = 800.0
    energy_base: float = 0.6
    energy_ar: float = 0.95
    energy_noise: float = 0.06
    unvoiced_energy_factor: float = 0.3
    frame_rate: float = 200.0
    vocab_size: int = 64
    # fraction of runs whose phoneme comes from a shared pool used by both
    # voiced and unvoiced runs, so text alone cannot decide voicing there
    ambiguous_fraction: float = 0.0

    def validate(self) -> None:
        if self.n_utterances < 1:
            raise DataError("need at least one utterance")
        if not 2 <= self.min_frames <= self.max_frames:
            raise DataError("frame range must satisfy 2 <= min <= max")
        if self.voiced_run_mean >= self.max_frames or self.unvoiced_run_mean >= self.max_frames:
            raise DataError("mean run length must be shorter than the longest utterance")
        if self.voiced_run_mean < 1.0 or self.unvoiced_run_mean < 1.0:
            raise DataError("mean run length must be at least one frame")
        if not 0.0 < self.f0_base_low <= self.f0_base_high:
            raise DataError("invalid F0 base range")
        if self.f0_base_low < self.f0_floor or self.f0_base_high > self.f0_ceil:
            raise DataError("F0 base range must sit inside the floor/ceil clamp")
        if self.vocab_size < 2:
            raise DataError("need at least one voiced and one unvoiced phoneme id")
        if not 0.0 <= self.energy_ar < 1.0:
            raise DataError("energy AR coefficient must be in [0, 1)")
        if not 0.0 <= self.ambiguous_fraction <= 1.0:
            raise DataError("ambiguous_fraction must be in [0, 1]")
        if self.ambiguous_fraction > 0.0 and self.vocab_size < 3:
            raise DataError("shared phoneme pool needs a vocabulary of at least 3")

    @property
    def voiced_ids(self) -> range:
        if self.ambiguous_fraction > 0.0:
            return range(0, self.vocab_size // 3)
        return range(0, self.vocab_size // 2)

    @property
    def unvoiced_ids(self) -> range:
        if self.ambiguous_fraction > 0.0:
            return range(self.vocab_size // 3, 2 * self.vocab_size // 3)
        return range(self.vocab_size // 2, self.vocab_size)

    @property
    def shared_ids(self) -> range:
        if self.ambiguous_fraction > 0.0:
            return range(2 * self.vocab_size // 3, self.vocab_size)
        return range(0, 0)


def _runs(rng: np.random.Generator, cfg: SynthConfig, total: int) -> list[tuple[bool, int]]:
    """Alternating (voiced, length) runs covering exactly ``total`` frames."""
    runs: list[tuple[bool, int]] = []
    covered = 0
    voiced = True  # lead with voice so every utterance has voiced frames
    while covered < total:
        mean = cfg.voiced_run_mean if voiced else cfg.unvoiced_run_mean
        length = int(rng.geometric(1.0 / mean))
        length = min(length, total - covered)
        runs.append((voiced, length))
        covered += length
        voiced = not voiced
    return runs


def gen_utterance(rng: np.random.Generator, cfg: SynthConfig) -> tuple[SequenceTrack, PhonemeSeq]:
    """One synthetic track plus its aligned phoneme sequence."""
    total = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
    runs = _runs(rng, cfg, total)

    voiced = np.concatenate([np.full(n, 1.0 if v else 0.0) for v, n in runs])
    ids = []
    for v, _ in runs:
        pool = cfg.voiced_ids if v else cfg.unvoiced_ids
        if cfg.ambiguous_fraction > 0.0 and rng.uniform() < cfg.ambiguous_fraction:
            pool = cfg.shared_ids
        ids.append(int(rng.choice(pool)))
    phones = PhonemeSeq(ids=ids, durations=[n for _, n in runs])

    t = np.arange(total, dtype=np.float64)
    ln_base = rng.uniform(math.log(cfg.f0_base_low), math.log(cfg.f0_base_high))
    drift_period = total * rng.uniform(0.7, 1.6)
    drift = cfg.drift_amp * np.sin(2.0 * math.pi * t / drift_period + rng.uniform(0, 2 * math.pi))
    vibrato = cfg.vibrato_amp * np.sin(
        2.0 * math.pi * cfg.vibrato_hz * t / cfg.frame_rate + rng.uniform(0, 2 * math.pi)
    )
    ln_f0 = ln_base + drift + vibrato + cfg.noise_level * rng.standard_normal(total)
    ln_f0 = np.clip(ln_f0, math.log(cfg.f0_floor), math.log(cfg.f0_ceil))
    f0 = np.where(voiced > 0.0, np.exp(ln_f0), 0.0)

    x = np.empty(total)
    x[0] = cfg.energy_noise * rng.standard_normal() / math.sqrt(1.0 - cfg.energy_ar**2)
    noise = cfg.energy_noise * rng.standard_normal(total)
    for i in range(1, total):
        x[i] = cfg.energy_ar * x[i - 1] + noise[i]
    energy = cfg.energy_base * np.exp(x)
    energy = np.where(voiced > 0.0, energy, energy * cfg.unvoiced_energy_factor)

    track = SequenceTrack(f0_hz=f0, voiced=voiced, energy=energy, frame_rate=cfg.frame_rate)
    return track, phones


def gen_corpus(cfg: SynthConfig) -> list[tuple[str, SequenceTrack, PhonemeSeq]]:
    """Deterministic corpus: each utterance gets its own spawned seed, so the
    set is reproducible regardless of generation order."""
    cfg.validate()
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_utterances)
    width = max(4, len(str(cfg.n_utterances - 1)))
    out = []
    for i, child in enumerate(children):
        track, phones = gen_utterance(np.random.default_rng(child), cfg)
        out.append((f"utt{i:0{width}d}", track, phones))
    return out


def gen_reference_moments(corpus: list[tuple[str, SequenceTrack, PhonemeSeq]]) -> tuple[float, float, float, float]:
    """Moments of the corpus's voiced F0 pooled in midi."""
    values = []
    for _, track, _ in corpus:
        mask = track.voiced > 0.0
        if mask.any():
            values.append(to_midi(track.f0_hz[mask]))
    if not values:
        raise DataError("corpus has no voiced frames")
    return moments(np.concatenate(values))
