"""Figure rendering for CLI reports.  All functions write PNG files via the
Agg backend and return the path they wrote, so they work headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .fileio import SequenceTrack  # noqa: E402
from .training import PriorMonitor  # noqa: E402


def _finish(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_history(history: list[tuple[int, float, float]], path: str) -> str:
    """Loss and latent-monitor curves; the monitor should settle at 0.5."""
    steps = [h[0] for h in history]
    loss = [h[1] for h in history]
    mon = [h[2] for h in history]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    ax1.plot(steps, loss, lw=0.8, color="tab:blue")
    ax1.set_ylabel("loss")
    ax1.grid(alpha=0.3)
    ax2.plot(steps, mon, lw=0.8, color="tab:orange", label="0.5 * mean(z^2)")
    ax2.axhline(PriorMonitor.TARGET, color="k", ls="--", lw=1, label="target 0.5")
    ax2.set_xlabel("step")
    ax2.set_ylabel("prior monitor")
    ax2.legend(loc="best", fontsize=8)
    ax2.grid(alpha=0.3)
    return _finish(fig, path)


def plot_violin(data: dict[str, list[float]], path: str, title: str = "") -> str:
    """One violin per metric over its per-utterance sample values."""
    names = [k for k, v in data.items() if len(v) > 0]
    fig, axes = plt.subplots(1, max(len(names), 1), figsize=(3.2 * max(len(names), 1), 4))
    if len(names) <= 1:
        axes = [axes]
    for ax, name in zip(axes, names):
        ax.violinplot([data[name]], showmedians=True)
        ax.set_xticks([1])
        ax.set_xticklabels([name])
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title)
    return _finish(fig, path)


def _f0_line(track: SequenceTrack) -> np.ndarray:
    return np.where(track.voiced > 0.0, track.f0_hz, np.nan)


def plot_track_overlay(samples: list[SequenceTrack], path: str,
                       ref: SequenceTrack | None = None, title: str = "") -> str:
    """F0 contours (unvoiced gaps blank) and energy for samples vs reference."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
    for i, s in enumerate(samples):
        t = np.arange(s.f0_hz.shape[0]) / s.frame_rate
        ax1.plot(t, _f0_line(s), lw=0.8, alpha=0.7,
                 label="samples" if i == 0 else None)
        ax2.plot(t, s.energy, lw=0.8, alpha=0.7)
    if ref is not None:
        t = np.arange(ref.f0_hz.shape[0]) / ref.frame_rate
        ax1.plot(t, _f0_line(ref), lw=1.6, color="k", label="reference")
        ax2.plot(t, ref.energy, lw=1.6, color="k")
    ax1.set_ylabel("F0 [Hz]")
    ax1.legend(loc="best", fontsize=8)
    ax1.grid(alpha=0.3)
    ax2.set_xlabel("time [s]")
    ax2.set_ylabel("energy")
    ax2.grid(alpha=0.3)
    if title:
        fig.suptitle(title)
    return _finish(fig, path)


def plot_channels(channels: np.ndarray, voiced: np.ndarray, path: str,
                  title: str = "") -> str:
    """Stacked per-channel traces of a preprocessed utterance with the
    voicing mask shaded underneath."""
    channels = np.asarray(channels)
    n = channels.shape[1]
    fig, axes = plt.subplots(n, 1, figsize=(9, 1.4 * n + 1), sharex=True)
    if n == 1:
        axes = [axes]
    t = np.arange(channels.shape[0])
    for d, ax in enumerate(axes):
        ax.fill_between(t, 0, 1, where=np.asarray(voiced) > 0,
                        transform=ax.get_xaxis_transform(),
                        color="tab:green", alpha=0.12)
        ax.plot(t, channels[:, d], lw=0.8)
        ax.set_ylabel(f"ch{d}", fontsize=8)
        ax.grid(alpha=0.3)
    axes[-1].set_xlabel("frame")
    if title:
        fig.suptitle(title)
    return _finish(fig, path)


def plot_corpus_overview(tracks: list[tuple[str, SequenceTrack]], path: str) -> str:
    """F0 contours of the first few utterances of a generated corpus."""
    fig, ax = plt.subplots(figsize=(9, 4))
    for utt_id, track in tracks[:5]:
        t = np.arange(track.f0_hz.shape[0]) / track.frame_rate
        ax.plot(t, _f0_line(track), lw=0.9, label=utt_id)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("F0 [Hz]")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    return _finish(fig, path)
