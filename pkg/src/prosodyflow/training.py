"""Training loop: Adam with global-norm clipping, rolling prior monitor,
periodic checkpoints with bit-exact resume, and incremental history output.
"""

from __future__ import annotations

import math
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .errors import NumericError, TrainingError
from .metrics import moments
from .models import Batch, ModelConfig, make_batches

HISTORY_HEADER = "step,loss,monitor"


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    nll_weight: float = 1.0
    bce_weight: float = 1.0
    grad_clip: float = 10.0
    monitor_window: int = 500
    checkpoint_every: int = 1000
    decay_tail: float = 0.3
    lr_min: float = 1e-5

    def validate(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise TrainingError("steps and batch_size must be positive")
        if self.lr <= 0.0 or self.grad_clip <= 0.0:
            raise TrainingError("lr and grad_clip must be positive")
        if not 0.0 <= self.decay_tail <= 1.0:
            raise TrainingError("decay_tail must be in [0, 1]")
        if self.lr_min <= 0.0 or self.lr_min > self.lr:
            raise TrainingError("lr_min must be in (0, lr]")

    def lr_at(self, step: int) -> float:
        """Step-size schedule: constant, then a cosine taper to ``lr_min``
        over the final ``decay_tail`` fraction of steps.

        The taper parks the parameters instead of letting the optimizer
        jitter around the optimum, which steadies late-training statistics
        such as the prior monitor.  A pure function of the step index, so
        resumed runs replay it exactly.
        """
        flat = self.steps * (1.0 - self.decay_tail)
        if step < flat or self.decay_tail == 0.0:
            return self.lr
        frac = (step - flat) / (self.steps - flat)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * frac))


class PriorMonitor:
    """Rolling mean of the half-mean-square latent statistic.

    For a well-matched flow the statistic sits at 0.5 (each latent element
    standard normal), so the rolling mean doubles as a convergence readout.
    """

    TARGET = 0.5

    def __init__(self, window: int = 500):
        self.values: deque[float] = deque(maxlen=int(window))

    def update(self, value: float) -> float:
        self.values.append(float(value))
        return self.mean()

    def mean(self) -> float:
        if not self.values:
            return float("nan")
        return float(np.mean(self.values))

    def deviation(self) -> float:
        return abs(self.mean() - self.TARGET)


def train_step(model, batch: Batch, optimizer: engine.Adam, cfg: TrainConfig) -> tuple[float, dict]:
    """One optimization step; returns (loss, stats).  Non-finite loss or
    gradients raise NumericError before any parameter is touched."""
    optimizer.zero_grad()
    total, stats = model.loss(batch, nll_weight=cfg.nll_weight, bce_weight=cfg.bce_weight)
    loss_val = float(total.data)
    if not np.isfinite(loss_val):
        raise NumericError(f"non-finite loss {loss_val}")
    total.backward()
    engine.clip_global_norm(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return loss_val, stats


@dataclass
class FitResult:
    history: list[tuple[int, float, float]] = field(default_factory=list)
    monitor: float = float("nan")
    best_step: int = -1
    best_loss: float = float("inf")


def _checkpoint_extra(optimizer: engine.Adam, rng: np.random.Generator, step: int) -> dict:
    return {
        "optimizer": optimizer.state_dict(),
        "rng_state": rng.bit_generator.state,
        "step": step,
    }


def fit(model, prepared: list, cfg: TrainConfig, out_dir: str | None = None,
        resume: dict | None = None) -> FitResult:
    """Train ``model`` on prepared utterances.

    Deterministic for a fixed seed: utterances are bucketed into fixed
    batches and the per-step batch choice comes from a dedicated generator
    whose state rides along in every checkpoint, so an interrupted run
    resumed from ``checkpoint_latest.json`` replays the exact remaining
    steps.  When ``out_dir`` is given the loop appends each step to
    ``history.csv`` as it happens and writes ``checkpoint_latest.json``
    every ``checkpoint_every`` steps, so a crash or NaN abort still leaves
    the last good state on disk.  ``resume`` takes the payload of a
    previously written checkpoint (parameters must already be restored by
    the caller via ``load_model``).
    """
    cfg.validate()
    batches = make_batches(prepared, model.config, cfg.batch_size)
    optimizer = engine.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    monitor = PriorMonitor(cfg.monitor_window)
    result = FitResult()
    start = 0
    history_fh = None

    if resume is not None:
        optimizer.load_state_dict(resume["optimizer"])
        rng.bit_generator.state = resume["rng_state"]
        start = int(resume["step"])
        if start >= cfg.steps:
            raise TrainingError(f"checkpoint already at step {start}", step=start)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        history_path = os.path.join(out_dir, "history.csv")
        fresh = resume is None or not os.path.exists(history_path)
        history_fh = open(history_path, "w" if fresh else "a")
        if fresh:
            history_fh.write(HISTORY_HEADER + "\n")

    try:
        for step in range(start, cfg.steps):
            batch = batches[int(rng.integers(len(batches)))]
            optimizer.lr = cfg.lr_at(step)
            try:
                loss_val, stats = train_step(model, batch, optimizer, cfg)
            except NumericError as exc:
                raise TrainingError(str(exc), step=step) from exc
            monitor.update(stats["monitor"])
            result.history.append((step, loss_val, stats["monitor"]))
            if history_fh is not None:
                history_fh.write(f"{step},{loss_val!r},{stats['monitor']!r}\n")
                history_fh.flush()
            if loss_val < result.best_loss:
                result.best_loss = loss_val
                result.best_step = step
            done = step + 1
            if out_dir is not None and (done % cfg.checkpoint_every == 0 or done == cfg.steps):
                model.save(os.path.join(out_dir, "checkpoint_latest.json"),
                           extra=_checkpoint_extra(optimizer, rng, done))
    finally:
        if history_fh is not None:
            history_fh.close()

    result.monitor = monitor.mean()
    if out_dir is not None:
        model.save(os.path.join(out_dir, "checkpoint_final.json"),
                   extra=_checkpoint_extra(optimizer, rng, cfg.steps))
    return result


@dataclass
class ZStats:
    """Latent-distribution statistics under the data (valid elements only)."""

    mean: float
    variance: float
    skewness: float
    kurtosis_excess: float
    n_elements: int

    def as_dict(self) -> dict:
        return {
            "mean": self.mean,
            "variance": self.variance,
            "skewness": self.skewness,
            "kurtosis_excess": self.kurtosis_excess,
            "n_elements": self.n_elements,
        }


def monitor_eval(model, prepared: list, batch_size: int = 8) -> ZStats:
    """Push data through the flow and report latent moments; a converged
    model should be near mean 0, variance 1, skewness 0, excess kurtosis 0."""
    values = []
    for batch in make_batches(prepared, model.config, batch_size):
        z, mask = model.latents(batch)
        values.append(z[mask.astype(bool)].reshape(-1))
    flat = np.concatenate(values)
    mu, std, skew, kurt = moments(flat)
    return ZStats(mean=mu, variance=std**2, skewness=skew,
                  kurtosis_excess=kurt, n_elements=int(flat.size))
