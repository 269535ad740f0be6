"""Flow architectures over grouped prosody channels.

Two models share one interface:

* ``BipartiteFlow``: steps of (1x1 invertible channel mix, coupling layer)
  applied in parallel over time.  The coupling transforms the first half of
  the channels with parameters predicted from the other half plus context.
* ``AutoregressiveFlow``: steps of a causal per-frame transform whose
  parameters come from a 2-layer LSTM over preceding frames (plus context);
  frame order is reversed after every step so the stack sees both directions.

Both expose ``loss(batch)`` for training (exact negative log-likelihood under
a standard-normal latent, plus the voicing-classifier loss when the
voiced-aware context is enabled) and ``sample(...)`` for latent-to-data
generation with a temperature.

The module also owns the batching pipeline: per-utterance static
preprocessing, padding, grouping, and the tape-level construction of the
learned-bias data route (the bias shifts the data the flow models, so it must
stay differentiable).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from . import engine, features, transforms
from .conditioning import Conditioner, PhonemeSeq
from .engine import Dense, LSTM, Tensor
from .errors import DataError, ShapeError
from .features import cwt_decode
from .fileio import SequenceTrack
from .metrics import threshold_sampled_track

LOG_2PI = math.log(2.0 * math.pi)

FILLER_MAP = {"dtx": "distance_transform", "interp": "linear_interp", "none": "none"}

MODEL_KINDS = ("bgap", "agap")
FEATURES = ("f0", "energy")
BGAP_COUPLINGS = ("hybrid", "affine", "spline")
AGAP_COUPLINGS = ("affine", "spline")
FILLERS = ("dtx", "bias", "interp", "none")
AUXES = ("diff", "cwt")


@dataclass
class ModelConfig:
    kind: str = "bgap"
    feature: str = "f0"
    coupling: str = "hybrid"
    aux: str = "diff"
    filler: str = "dtx"
    group_size: int = 2
    n_steps: int = 6
    spline_bins: int = 24
    spline_bound: float = 3.0
    context_channels: int = 512
    ctx_proj: int = 64
    predictor_width: int = 256
    lstm_hidden: int = 128
    clf_hidden: int = 64
    vocab_size: int = 64
    voiced_context: bool = True
    f0_divisor: float = 6.0
    diff_kappa: float = 2.0
    energy_diff_gain: float = 10.0

    @classmethod
    def for_kind(cls, kind: str, feature: str = "f0", **overrides) -> "ModelConfig":
        """Construct with the per-architecture defaults filled in."""
        base: dict = {"kind": kind, "feature": feature}
        if kind == "agap":
            base.update(coupling="spline", n_steps=2, spline_bound=6.0, filler="bias")
        if feature == "energy":
            base.update(group_size=4, filler="none")
        base.update(overrides)
        cfg = cls(**base)
        cfg.validate()
        return cfg

    def validate(self) -> list[str]:
        """Raise on invalid combinations; return a list of warnings for the
        legal-but-unusual ones."""
        warnings: list[str] = []
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"kind must be one of {MODEL_KINDS}")
        if self.feature not in FEATURES:
            raise ValueError(f"feature must be one of {FEATURES}")
        if self.aux not in AUXES:
            raise ValueError(f"aux must be one of {AUXES}")
        if self.filler not in FILLERS:
            raise ValueError(f"filler must be one of {FILLERS}")
        if self.kind == "bgap" and self.coupling not in BGAP_COUPLINGS:
            raise ValueError(f"bgap coupling must be one of {BGAP_COUPLINGS}")
        if self.kind == "agap" and self.coupling not in AGAP_COUPLINGS:
            raise ValueError(f"agap coupling must be one of {AGAP_COUPLINGS}")
        if self.feature == "energy":
            if self.aux == "cwt":
                raise ValueError("the wavelet representation applies to f0 only")
            if self.filler != "none":
                raise ValueError("energy models take no unvoiced filler")
        if self.feature == "f0" and self.aux == "cwt" and self.filler != "interp":
            raise ValueError("the wavelet route interpolates unvoiced gaps; use filler=interp")
        if self.kind == "agap" and self.filler == "dtx":
            warnings.append(
                "distance filler with the autoregressive model is unusual; "
                "the learned bias filler is its canonical pairing"
            )
        if self.kind == "bgap" and self.filler == "bias":
            warnings.append(
                "learned-bias filler with the bipartite model deviates from "
                "the canonical pairing (distance transform)"
            )
        if self.n_steps < 1:
            raise ValueError("n_steps must be positive")
        return warnings

    @property
    def frame_dims(self) -> int:
        """Channels per frame before grouping."""
        if self.feature == "energy":
            return 2
        return 12 if self.aux == "cwt" else 2

    @property
    def channels(self) -> int:
        """Model input channels after grouping."""
        return self.frame_dims * self.group_size

    def coupling_kinds(self) -> list[str]:
        """Per-step coupling kind, ordered data-side first; the hybrid preset
        puts the 4 spline steps nearest the latent."""
        if self.kind == "agap" or self.coupling != "hybrid":
            return [self.coupling] * self.n_steps
        n_affine = max(self.n_steps - 4, 0)
        return ["affine"] * n_affine + ["spline"] * (self.n_steps - n_affine)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dc_fields(self)}
        d["coupling_kinds"] = self.coupling_kinds()
        d["channels"] = self.channels
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dc_fields(cls)}
        cfg = cls(**{k: v for k, v in d.items() if k in names})
        cfg.validate()
        return cfg


# -- per-utterance preparation ---------------------------------------------------


@dataclass
class PreparedUtterance:
    utt_id: str
    n_frames: int
    n_groups: int
    voiced: np.ndarray
    frame_phones: np.ndarray
    static: np.ndarray | None = None      # [T, frame_dims] for precomputable routes
    ln_voiced: np.ndarray | None = None   # [T] ln f0 on voiced frames, 0 elsewhere
    main_voiced: np.ndarray | None = None  # [T] ln f0 / divisor on voiced, 0 elsewhere


def prepare_utterance(utt_id: str, track: SequenceTrack, phones: PhonemeSeq,
                      config: ModelConfig) -> PreparedUtterance:
    """Validate alignment and precompute the static per-utterance channels."""
    t = track.n_frames
    if phones.total_frames != t:
        raise DataError(
            f"{utt_id}: phoneme durations cover {phones.total_frames} frames, track has {t}"
        )
    if int(phones.ids.max()) >= config.vocab_size:
        raise DataError(f"{utt_id}: phoneme id {int(phones.ids.max())} outside vocabulary")
    if t < 2:
        raise DataError(f"{utt_id}: need at least 2 frames")
    voiced = track.voiced.astype(np.float64)
    frame_phones = phones.frame_ids()
    n_groups = -(-t // config.group_size)
    out = PreparedUtterance(utt_id, t, n_groups, voiced, frame_phones)

    if config.feature == "energy":
        out.static = features.scale_energy(track.energy, config.diff_kappa,
                                           config.energy_diff_gain)
    elif config.aux == "cwt":
        ln = np.zeros(t)
        v = voiced.astype(bool)
        ln[v] = np.log(track.f0_hz[v])
        out.static = features.cwt_encode(ln, v)
    elif config.filler == "bias":
        v = voiced.astype(bool)
        if np.any(track.f0_hz[v] <= 0.0):
            raise DataError(f"{utt_id}: voiced frame with non-positive f0")
        ln = np.zeros(t)
        ln[v] = np.log(track.f0_hz[v])
        out.ln_voiced = ln
        out.main_voiced = ln / config.f0_divisor
    else:
        out.static = features.scale_f0(track.f0_hz, voiced, FILLER_MAP[config.filler],
                                       config.f0_divisor, config.diff_kappa)
    return out


# -- batching ----------------------------------------------------------------------


@dataclass
class Batch:
    utt_ids: list[str]
    frame_lengths: np.ndarray          # [B] true frame counts
    group_lengths: np.ndarray          # [B] true group counts
    frame_mask: np.ndarray             # [B, Tpad]
    group_mask: np.ndarray             # [B, Tg]
    voiced: np.ndarray                 # [B, Tpad]
    frame_phones: np.ndarray           # [B, Tpad]
    x_static: np.ndarray | None = None  # [B, Tg, C]
    ln_voiced: np.ndarray | None = None
    main_voiced: np.ndarray | None = None
    diff_lo: np.ndarray | None = None
    diff_hi: np.ndarray | None = None
    diff_coef: np.ndarray | None = None
    rep_idx: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.utt_ids)


def _edge_pad(arr: np.ndarray, t_pad: int) -> np.ndarray:
    """Pad axis 0 to t_pad by repeating the final entry."""
    t = arr.shape[0]
    if t == t_pad:
        return arr
    reps = np.repeat(arr[-1:], t_pad - t, axis=0)
    return np.concatenate([arr, reps], axis=0)


def make_batch(prepared: list[PreparedUtterance], config: ModelConfig) -> Batch:
    n = config.group_size
    b = len(prepared)
    tg = max(p.n_groups for p in prepared)
    t_pad = tg * n
    frame_lengths = np.array([p.n_frames for p in prepared], dtype=np.int64)
    group_lengths = np.array([p.n_groups for p in prepared], dtype=np.int64)
    ar = np.arange(t_pad)
    arg = np.arange(tg)
    frame_mask = (ar[None, :] < frame_lengths[:, None]).astype(np.float64)
    group_mask = (arg[None, :] < group_lengths[:, None]).astype(np.float64)
    voiced = np.stack([_edge_pad(p.voiced, t_pad) for p in prepared])
    phones = np.stack([_edge_pad(p.frame_phones, t_pad) for p in prepared])
    batch = Batch([p.utt_id for p in prepared], frame_lengths, group_lengths,
                  frame_mask, group_mask, voiced, phones)

    if prepared[0].static is not None:
        xs = np.stack([_edge_pad(p.static, t_pad) for p in prepared])
        batch.x_static = xs.reshape(b, tg, n * config.frame_dims)
    else:
        batch.ln_voiced = np.stack([_edge_pad(p.ln_voiced, t_pad) for p in prepared])
        batch.main_voiced = np.stack([_edge_pad(p.main_voiced, t_pad) for p in prepared])
        last = frame_lengths[:, None] - 1
        batch.diff_hi = np.minimum(ar[None, :] + 1, last)
        batch.diff_lo = np.maximum(ar[None, :] - 1, 0)
        batch.diff_lo = np.minimum(batch.diff_lo, last)  # pad region: safe index
        coef = np.full((b, t_pad), 1.0 / config.diff_kappa)
        coef[:, 0] = 2.0 / config.diff_kappa
        np.put_along_axis(coef, last, 2.0 / config.diff_kappa, axis=1)
        coef *= frame_mask
        batch.diff_coef = coef
        batch.rep_idx = np.minimum(ar[None, :], last)
    return batch


def make_batches(prepared: list[PreparedUtterance], config: ModelConfig,
                 batch_size: int) -> list[Batch]:
    """Bucket by length (stable) and chunk, so padding stays small."""
    order = sorted(prepared, key=lambda p: (p.n_groups, p.utt_id))
    return [make_batch(order[i : i + batch_size], config)
            for i in range(0, len(order), batch_size)]


def reverse_np(x: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Numpy twin of engine.reverse_padded for sampling paths."""
    b, t = x.shape[0], x.shape[1]
    ar = np.arange(t)
    idx = np.where(ar[None, :] < lengths[:, None], lengths[:, None] - 1 - ar[None, :], ar[None, :])
    return x[np.arange(b)[:, None], idx]


# -- coupling parameter predictors ---------------------------------------------------


class _Predictor:
    """2-layer head mapping conditioning features to raw transform parameters.

    The final layer is zero-initialized so every coupling starts as the exact
    identity (uniform spline, unit affine).
    """

    def __init__(self, in_size: int, width: int, out_size: int, rng: np.random.Generator):
        self.trunk = Dense(in_size, width, activation="tanh", rng=rng)
        self.head = Dense(width, out_size, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.head(self.trunk(x))

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {**self.trunk.parameters(f"{prefix}.trunk"),
                **self.head.parameters(f"{prefix}.head")}


def _couple_forward(x: Tensor, raw: Tensor, kind: str, bins: int,
                    bound: float) -> tuple[Tensor, Tensor]:
    """Apply one coupling transform elementwise over the trailing channel axis.

    x: [..., D]; raw: [..., 2D] (affine: log-scale, bias) or [..., D*(2K+1)]
    (spline raw widths and vertices).  Returns (y, per-element log-derivative).
    """
    d = x.shape[-1]
    if kind == "affine":
        return transforms.affine_couple(x, raw[..., :d], raw[..., d:])
    raw3 = raw.reshape(x.shape + (2 * bins + 1,))
    return transforms.spline_couple(x, raw3[..., :bins], raw3[..., bins:], bound)


def _couple_inverse(y: np.ndarray, raw: np.ndarray, kind: str, bins: int,
                    bound: float) -> np.ndarray:
    d = y.shape[-1]
    if kind == "affine":
        return (y - raw[..., d:]) * np.exp(-raw[..., :d])
    raw3 = raw.reshape(y.shape + (2 * bins + 1,))
    return transforms.spline_inverse(y, raw3[..., :bins], raw3[..., bins:], bound)


def _raw_size(kind: str, d: int, bins: int) -> int:
    return 2 * d if kind == "affine" else d * (2 * bins + 1)


# -- shared model behavior --------------------------------------------------------


class _FlowBase:
    """Behavior shared by both architectures: context building, the learned
    unvoiced-bias data route, loss assembly, and checkpoint participation."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.cond = Conditioner(config.vocab_size, config.context_channels,
                                config.clf_hidden, rng)
        self.ctx_proj = Dense(config.group_size * config.context_channels,
                              config.ctx_proj, activation="tanh", rng=rng)

    # subclasses: forward(x, ctxp, batch) -> (z, total_logdet)
    #             _invert_latent(z, ctxp_np, batch_like) -> x np

    def _context(self, frame_phones: np.ndarray, voiced: np.ndarray) -> tuple[Tensor, Tensor]:
        """Returns (phi [B,T,C], projected grouped context [B,Tg,P])."""
        phi = self.cond.phi_frames(frame_phones)
        merged = self.cond.voiced_merge(phi, voiced) if self.config.voiced_context else phi
        b, t_pad, c = merged.shape
        grouped = merged.reshape(b, t_pad // self.config.group_size,
                                 self.config.group_size * c)
        return phi, self.ctx_proj(grouped)

    def build_x(self, batch: Batch) -> Tensor:
        """Model input [B, Tg, channels]; runs on the tape for the bias route."""
        cfg = self.config
        if batch.x_static is not None:
            return Tensor(batch.x_static)
        bias_all = self.cond.phoneme_bias()
        flat = batch.frame_phones.reshape(-1)
        bias_f = engine.take_rows(bias_all.reshape(-1, 1), flat).reshape(batch.frame_phones.shape)
        unv = Tensor(1.0 - batch.voiced)
        u = Tensor(batch.ln_voiced) + bias_f * unv
        main = Tensor(batch.main_voiced) + bias_f * unv
        diff = (engine.gather_time(u, batch.diff_hi) -
                engine.gather_time(u, batch.diff_lo)) * Tensor(batch.diff_coef)
        main = engine.gather_time(main, batch.rep_idx)
        diff = engine.gather_time(diff, batch.rep_idx)
        b, t_pad = batch.frame_phones.shape
        x = engine.concat([main.reshape(b, t_pad, 1), diff.reshape(b, t_pad, 1)], axis=-1)
        return x.reshape(b, t_pad // cfg.group_size, cfg.group_size * cfg.frame_dims)

    def loss(self, batch: Batch, nll_weight: float = 1.0,
             bce_weight: float = 1.0) -> tuple[Tensor, dict]:
        """Weighted training loss and a stats dict with 'nll', 'bce', 'monitor'."""
        phi, ctxp = self._context(batch.frame_phones, batch.voiced)
        x = self.build_x(batch)
        z, logdet = self.forward(x, ctxp, batch)
        mask_e = Tensor(batch.group_mask[..., None])
        n_elems = float(batch.group_mask.sum()) * self.config.channels
        z2 = (z * z * mask_e).sum()
        nll = z2 * (0.5 / n_elems) + 0.5 * LOG_2PI - logdet * (1.0 / n_elems)
        monitor = 0.5 * float(z2.data) / n_elems
        stats = {"nll": float(nll.data), "monitor": monitor, "bce": 0.0}
        total = nll * nll_weight
        if self.config.voiced_context:
            logits = self.cond.classifier_logits(phi)
            bce = self.cond.classifier_bce(logits, batch.voiced, batch.frame_mask)
            stats["bce"] = float(bce.data)
            total = total + bce * bce_weight
        return total, stats

    def latents(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        """Latent values and their validity mask, gradient-free."""
        with engine.no_grad():
            _, ctxp = self._context(batch.frame_phones, batch.voiced)
            z, _ = self.forward(self.build_x(batch), ctxp, batch)
        mask = np.broadcast_to(batch.group_mask[..., None], z.shape)
        return z.data, mask

    # -- sampling ------------------------------------------------------------

    def sample_utterance(self, phones: PhonemeSeq, n_frames: int, n_samples: int,
                         sigma: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw n_samples latent sequences for one utterance and invert them.

        Returns (channel sequences [S, T, frame_dims], predicted voicing [T]).
        """
        cfg = self.config
        if phones.total_frames != n_frames:
            raise DataError("phoneme durations do not match requested length")
        n_groups = -(-n_frames // cfg.group_size)
        t_pad = n_groups * cfg.group_size
        frame_phones = _edge_pad(phones.frame_ids(), t_pad)
        if cfg.voiced_context:
            v_pred = self.cond.predict_voiced(frame_phones)
        else:
            v_pred = np.ones(t_pad)
        tiled_phones = np.broadcast_to(frame_phones, (n_samples, t_pad)).copy()
        tiled_v = np.broadcast_to(v_pred, (n_samples, t_pad)).copy()
        with engine.no_grad():
            _, ctxp = self._context(tiled_phones, tiled_v)
        lengths = np.full(n_samples, n_groups, dtype=np.int64)
        z = rng.normal(size=(n_samples, n_groups, cfg.channels)) * sigma
        x = self._invert_latent(z, ctxp.data, lengths)
        flat = x.reshape(n_samples, t_pad, cfg.frame_dims)[:, :n_frames]
        return flat, v_pred[:n_frames]

    # -- parameters and checkpoints -----------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        params = self.cond.parameters("ctx")
        params.update(self.ctx_proj.parameters("ctx_proj"))
        params.update(self._step_parameters())
        return params

    def save(self, path: str, extra: dict | None = None) -> None:
        payload = {"model_config": self.config.to_dict()}
        if extra:
            payload.update(extra)
        engine.save_checkpoint(path, self.parameters(), extra=payload)


# -- bipartite model ------------------------------------------------------------------


class BipartiteFlow(_FlowBase):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__(config, rng)
        c = config.channels
        self.n_a = (c + 1) // 2
        n_b = c - self.n_a
        self.kinds = config.coupling_kinds()
        self.convs: list[Tensor] = []
        self.preds: list[_Predictor] = []
        for kind in self.kinds:
            self.convs.append(Tensor(transforms.random_orthogonal(c, rng),
                                     requires_grad=True))
            self.preds.append(_Predictor(n_b + config.ctx_proj, config.predictor_width,
                                         _raw_size(kind, self.n_a, config.spline_bins), rng))

    def _step_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, (w, p) in enumerate(zip(self.convs, self.preds)):
            params[f"step{i}.conv"] = w
            params.update(p.parameters(f"step{i}.pred"))
        return params

    def forward(self, x: Tensor, ctxp: Tensor, batch: Batch) -> tuple[Tensor, Tensor]:
        cfg = self.config
        mask_e = Tensor(batch.group_mask[..., None])
        n_valid = float(batch.group_mask.sum())
        logdet = Tensor(0.0)
        for w, pred, kind in zip(self.convs, self.preds, self.kinds):
            transforms._check_invertible(w.data)
            x = engine.linear(x, w)
            logdet = logdet + engine.logabsdet(w) * n_valid
            xa = x[..., : self.n_a]
            xb = x[..., self.n_a :]
            raw = pred(engine.concat([xb, ctxp], axis=-1))
            ya, lde = _couple_forward(xa, raw, kind, cfg.spline_bins, cfg.spline_bound)
            logdet = logdet + (lde * mask_e).sum()
            x = engine.concat([ya, xb], axis=-1)
        return x, logdet

    def _invert_latent(self, z: np.ndarray, ctxp: np.ndarray,
                       lengths: np.ndarray) -> np.ndarray:
        cfg = self.config
        x = z
        ctx_t = Tensor(ctxp)
        with engine.no_grad():
            for w, pred, kind in zip(reversed(self.convs), reversed(self.preds),
                                     reversed(self.kinds)):
                ya = x[..., : self.n_a]
                xb = x[..., self.n_a :]
                raw = pred(engine.concat([Tensor(xb), ctx_t], axis=-1)).data
                xa = _couple_inverse(ya, raw, kind, cfg.spline_bins, cfg.spline_bound)
                x = np.concatenate([xa, xb], axis=-1)
                x = transforms.invconv_inverse(x, w.data)
        return x


# -- autoregressive model ----------------------------------------------------------------


class AutoregressiveFlow(_FlowBase):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__(config, rng)
        c = config.channels
        self.kinds = config.coupling_kinds()
        self.lstm1: list[LSTM] = []
        self.lstm2: list[LSTM] = []
        self.heads: list[Dense] = []
        for kind in self.kinds:
            self.lstm1.append(LSTM(c, config.lstm_hidden, rng=rng))
            self.lstm2.append(LSTM(config.lstm_hidden + config.ctx_proj,
                                   config.lstm_hidden, rng=rng))
            self.heads.append(Dense(config.lstm_hidden,
                                    _raw_size(kind, c, config.spline_bins),
                                    zero_init=True))

    def _step_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i in range(len(self.kinds)):
            params.update(self.lstm1[i].parameters(f"step{i}.lstm1"))
            params.update(self.lstm2[i].parameters(f"step{i}.lstm2"))
            params.update(self.heads[i].parameters(f"step{i}.head"))
        return params

    def _step_params_raw(self, i: int, shifted: Tensor, ctx: Tensor) -> Tensor:
        h1 = self.lstm1[i](shifted)
        h2 = self.lstm2[i](engine.concat([h1, ctx], axis=-1))
        return self.heads[i](h2)

    def forward(self, x: Tensor, ctxp: Tensor, batch: Batch) -> tuple[Tensor, Tensor]:
        cfg = self.config
        b, tg, c = x.shape
        mask_e = Tensor(batch.group_mask[..., None])
        lengths = batch.group_lengths
        logdet = Tensor(0.0)
        zero = Tensor(np.zeros((b, 1, c)))
        cur, ctx = x, ctxp
        for i, kind in enumerate(self.kinds):
            shifted = engine.concat([zero, cur[:, :-1]], axis=1)
            raw = self._step_params_raw(i, shifted, ctx)
            cur, lde = _couple_forward(cur, raw, kind, cfg.spline_bins, cfg.spline_bound)
            logdet = logdet + (lde * mask_e).sum()
            cur = engine.reverse_padded(cur, lengths)
            ctx = engine.reverse_padded(ctx, lengths)
        return cur, logdet

    def _invert_latent(self, z: np.ndarray, ctxp: np.ndarray,
                       lengths: np.ndarray) -> np.ndarray:
        cfg = self.config
        b, tg, c = z.shape
        ctx_orient = [ctxp]
        for _ in range(len(self.kinds) - 1):
            ctx_orient.append(reverse_np(ctx_orient[-1], lengths))
        y = z
        with engine.no_grad():
            for i in reversed(range(len(self.kinds))):
                y = reverse_np(y, lengths)
                ctx = ctx_orient[i]
                y = self._invert_step(i, y, ctx)
        return y

    def _invert_step(self, i: int, y: np.ndarray, ctx: np.ndarray) -> np.ndarray:
        """Sequential inversion: frame t needs the already-generated frames < t."""
        cfg = self.config
        b, tg, c = y.shape
        l1, l2, head = self.lstm1[i], self.lstm2[i], self.heads[i]
        h1 = np.zeros((b, cfg.lstm_hidden))
        c1 = np.zeros((b, cfg.lstm_hidden))
        h2 = np.zeros((b, cfg.lstm_hidden))
        c2 = np.zeros((b, cfg.lstm_hidden))
        x_prev = np.zeros((b, c))
        out = np.empty_like(y)
        kind = self.kinds[i]
        for t in range(tg):
            h1, c1 = l1.step(x_prev, h1, c1)
            h2, c2 = l2.step(np.concatenate([h1, ctx[:, t]], axis=-1), h2, c2)
            raw = h2 @ head.weight.data.T + head.bias.data
            x_t = _couple_inverse(y[:, t], raw, kind, cfg.spline_bins, cfg.spline_bound)
            if not np.all(np.isfinite(x_t)):
                raise DataError(f"non-finite sample value at frame {t}")
            out[:, t] = x_t
            x_prev = x_t
        return out


# -- factory and sampled-track assembly ---------------------------------------------------


def build_model(config: ModelConfig, seed: int = 0):
    config.validate()
    rng = np.random.default_rng(seed)
    cls = BipartiteFlow if config.kind == "bgap" else AutoregressiveFlow
    return cls(config, rng)


def load_model(path: str):
    """Rebuild a model from a checkpoint written by _FlowBase.save."""
    payload = engine.load_checkpoint(path)
    if "model_config" not in payload:
        raise DataError(f"{path}: checkpoint has no model_config")
    config = ModelConfig.from_dict(payload["model_config"])
    model = build_model(config, seed=0)
    engine.restore_params(model.parameters(), payload)
    return model, payload


def channels_to_track(channels: np.ndarray, config: ModelConfig,
                      v_pred: np.ndarray, frame_rate: float = 200.0) -> SequenceTrack:
    """Turn one sampled [T, frame_dims] channel matrix into a track.

    Energy models keep channel 0 (clamped non-negative) as the energy
    contour.  Wavelet models reconstruct log-F0 from the coefficient
    channels (the sampled spread channel is floored to stay decodable) and
    take voicing from the classifier.  For scalar-F0 models the voicing
    source depends on the filler: distance-transform filler values sit far
    below the voiced floor, so thresholding the main channel separates them
    even in noisy samples; interpolation leaves the channel voiced
    everywhere and the learned bias sits just under the floor — close enough
    that sigma-1 samples straddle any fixed cut — so both of those take
    voicing from the classifier when the model has one.
    """
    channels = np.asarray(channels, dtype=np.float64)
    n = channels.shape[0]
    if config.feature == "energy":
        energy = np.clip(channels[:, 0], 0.0, None)
        return SequenceTrack(f0_hz=np.zeros(n), voiced=np.zeros(n), energy=energy,
                             frame_rate=frame_rate)
    if config.aux == "cwt":
        m = channels[:, :12].copy()
        m[:, 11] = np.clip(m[:, 11], 1e-6, None)
        f0_log = np.clip(cwt_decode(m), math.log(1e-2), math.log(1e4))
        voiced = np.asarray(v_pred, dtype=np.float64)
        f0 = np.where(voiced > 0.0, np.exp(f0_log), 0.0)
    elif config.filler == "interp" or (config.filler == "bias" and config.voiced_context):
        voiced = np.asarray(v_pred, dtype=np.float64)
        main = np.clip(channels[:, 0] * config.f0_divisor, math.log(1e-2), math.log(1e4))
        f0 = np.where(voiced > 0.0, np.exp(main), 0.0)
    else:
        f0, voiced = threshold_sampled_track(channels[:, 0], divisor=config.f0_divisor)
        f0 = np.clip(f0, None, 1e4) * (voiced > 0.0)
    return SequenceTrack(f0_hz=f0, voiced=voiced, energy=np.zeros(n),
                         frame_rate=frame_rate)
