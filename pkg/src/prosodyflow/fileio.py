"""File formats: track CSV, phoneme JSON, history CSV, manifests, reports.

Track files carry one utterance: a ``frame_rate=<float>`` header line, then
rows ``t,f0_hz,voiced,energy`` with t a consecutive 0-based frame index.
Parsing is strict and failures name the offending line.  Floats are written
with repr so files round-trip bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .conditioning import PhonemeSeq
from .errors import DataError


@dataclass
class SequenceTrack:
    """One utterance of frame-level prosody values."""

    f0_hz: np.ndarray
    voiced: np.ndarray
    energy: np.ndarray
    frame_rate: float = 200.0

    def __post_init__(self):
        self.f0_hz = np.asarray(self.f0_hz, dtype=np.float64)
        self.voiced = np.asarray(self.voiced, dtype=np.float64)
        self.energy = np.asarray(self.energy, dtype=np.float64)
        t = self.f0_hz.shape[0]
        if t < 1:
            raise DataError("track must have at least one frame")
        if self.voiced.shape[0] != t or self.energy.shape[0] != t:
            raise DataError("track channel lengths differ")
        if not (np.all(np.isfinite(self.f0_hz)) and np.all(np.isfinite(self.energy))):
            raise DataError("non-finite track values")
        if not np.all((self.voiced == 0.0) | (self.voiced == 1.0)):
            raise DataError("voiced mask must be binary")
        if not np.all((self.f0_hz > 0.0) == (self.voiced == 1.0)):
            raise DataError("f0 > 0 must coincide exactly with voiced = 1")
        if self.frame_rate <= 0.0:
            raise DataError("frame_rate must be positive")

    @property
    def n_frames(self) -> int:
        return int(self.f0_hz.shape[0])


def write_track(path: str, track: SequenceTrack) -> None:
    lines = [f"frame_rate={float(track.frame_rate)!r}"]
    for t in range(track.n_frames):
        lines.append(
            f"{t},{float(track.f0_hz[t])!r},{int(track.voiced[t])},{float(track.energy[t])!r}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_track(path: str) -> SequenceTrack:
    with open(path) as fh:
        raw = fh.read().splitlines()
    if not raw or not raw[0].startswith("frame_rate="):
        raise DataError(f"{path}: line 1: expected 'frame_rate=<float>' header")
    try:
        frame_rate = float(raw[0].split("=", 1)[1])
    except ValueError:
        raise DataError(f"{path}: line 1: malformed frame_rate") from None
    f0, voiced, energy = [], [], []
    for lineno, line in enumerate(raw[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise DataError(f"{path}: line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            t = int(parts[0])
            f = float(parts[1])
            v = int(parts[2])
            e = float(parts[3])
        except ValueError:
            raise DataError(f"{path}: line {lineno}: malformed numeric field") from None
        if t != len(f0):
            raise DataError(f"{path}: line {lineno}: frame index {t} out of order")
        if v not in (0, 1):
            raise DataError(f"{path}: line {lineno}: voiced flag must be 0 or 1")
        f0.append(f)
        voiced.append(v)
        energy.append(e)
    if not f0:
        raise DataError(f"{path}: no frame rows")
    try:
        return SequenceTrack(np.array(f0), np.array(voiced, dtype=np.float64),
                             np.array(energy), frame_rate)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_phonemes(path: str, seq: PhonemeSeq) -> None:
    with open(path, "w") as fh:
        json.dump({"ids": seq.ids.tolist(), "durations": seq.durations.tolist()}, fh)


def read_phonemes(path: str) -> PhonemeSeq:
    with open(path) as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict) or "ids" not in payload or "durations" not in payload:
        raise DataError(f"{path}: phoneme file must contain 'ids' and 'durations'")
    try:
        return PhonemeSeq(np.array(payload["ids"]), np.array(payload["durations"]))
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


# -- corpus directories ----------------------------------------------------------


def corpus_ids(corpus_dir: str) -> list[str]:
    """Utterance ids present as track files, sorted."""
    ids = []
    for name in os.listdir(corpus_dir):
        if name.endswith(".track.csv"):
            ids.append(name[: -len(".track.csv")])
    return sorted(ids)


def load_corpus(corpus_dir: str) -> list[tuple[str, SequenceTrack, PhonemeSeq]]:
    """Read all (id, track, phonemes) triples; phoneme files are required."""
    items = []
    for utt_id in corpus_ids(corpus_dir):
        track = read_track(os.path.join(corpus_dir, f"{utt_id}.track.csv"))
        ph_path = os.path.join(corpus_dir, f"{utt_id}.phones.json")
        if not os.path.exists(ph_path):
            raise DataError(f"missing phoneme file for utterance {utt_id}")
        phones = read_phonemes(ph_path)
        if phones.total_frames != track.n_frames:
            raise DataError(
                f"{utt_id}: phoneme durations sum to {phones.total_frames}, "
                f"track has {track.n_frames} frames"
            )
        items.append((utt_id, track, phones))
    if not items:
        raise DataError(f"no utterances found in {corpus_dir}")
    return items


# -- history, manifest, reports -----------------------------------------------


def write_history(path: str, rows: list[tuple[int, float, float]]) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss,monitor\n")
        for step, loss, monitor in rows:
            fh.write(f"{step},{loss!r},{monitor!r}\n")


def read_history(path: str) -> list[tuple[int, float, float]]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "step,loss,monitor":
        raise DataError(f"{path}: missing history header")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise DataError(f"{path}: line {lineno}: expected 3 fields")
        rows.append((int(parts[0]), float(parts[1]), float(parts[2])))
    return rows


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: str, command: str, config: dict, seed: int | None,
                   inputs: dict[str, str], artifacts: list[str], version: str) -> None:
    """One manifest per output directory: config snapshot, seed, digests of
    the inputs consumed and of every artifact written (paths relative to the
    directory), so results can be re-verified by re-hashing."""
    digests = {rel: sha256_file(os.path.join(out_dir, rel)) for rel in sorted(artifacts)}
    payload = {
        "tool": "prosodyflow",
        "version": version,
        "command": command,
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "artifacts": digests,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_report(path: str, metrics: dict[str, dict]) -> None:
    """Metric report: {metric: {mean, values: {utt_id: value}}}."""
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_violin_csv(path: str, rows: list[tuple[str, str, float]]) -> None:
    """Per-utterance metric samples: utt_id,metric,value rows."""
    with open(path, "w") as fh:
        fh.write("utt_id,metric,value\n")
        for utt_id, metric, value in rows:
            fh.write(f"{utt_id},{metric},{value!r}\n")


def write_moments_csv(path: str, rows: dict[str, tuple[float, float, float, float]]) -> None:
    """Moments table, one row per source, columns mu1..mu4."""
    with open(path, "w") as fh:
        fh.write("source,mu1,mu2,mu3,mu4\n")
        for name, (m1, m2, m3, m4) in rows.items():
            fh.write(f"{name},{m1!r},{m2!r},{m3!r},{m4!r}\n")
