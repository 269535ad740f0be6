"""Numerical verification suites: inversion round-trips, log-determinant
agreement with finite-difference Jacobians, and end-to-end gradient checks.

Each check returns a :class:`CheckResult`; the CLI ``check`` subcommand and
the test suite both run these.  All randomness is seeded, so a failure
reproduces exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine, transforms
from .corpus import SynthConfig, gen_corpus
from .errors import CheckFailure
from .models import ModelConfig, build_model, make_batches, prepare_utterance

LAYER_TOL = 1e-9
MODEL_TOL = 1e-5
AFFINE_LOGDET_TOL = 1e-6
INVCONV_LOGDET_TOL = 1e-6
SPLINE_LOGDET_TOL = 1e-4
GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tol: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        out = f"{status} {self.name}: {self.value:.3e} (tol {self.tol:.0e})"
        return out + (f" [{self.detail}]" if self.detail else "")


def _result(name: str, value: float, tol: float, detail: str = "") -> CheckResult:
    return CheckResult(name=name, passed=bool(value < tol), value=float(value),
                       tol=tol, detail=detail)


# -- inversion round-trips -----------------------------------------------------


def check_affine_inverse(rng: np.random.Generator, n: int = 10_000) -> CheckResult:
    x = rng.uniform(-5.0, 5.0, size=n)
    scale = np.exp(rng.uniform(-2.0, 2.0, size=n))
    bias = rng.uniform(-3.0, 3.0, size=n)
    with engine.no_grad():
        y, _ = transforms.affine_forward(x, scale, bias)
    back = transforms.affine_inverse(y.data, scale, bias)
    return _result("inverse/affine", float(np.abs(back - x).max()), LAYER_TOL,
                   f"{n} elements")


def check_spline_inverse(rng: np.random.Generator, n: int = 10_000,
                         bound: float = 3.0, bins: int = 24) -> CheckResult:
    raw_w = rng.normal(0.0, 1.0, size=(n, bins))
    raw_v = rng.normal(0.0, 1.0, size=(n, bins + 1))
    # cover the interior, values beyond the box, and the boundary itself
    x = rng.uniform(-bound - 1.0, bound + 1.0, size=n)
    x[: n // 50] = bound
    x[n // 50 : n // 25] = -bound
    with engine.no_grad():
        y, _ = transforms.spline_forward(x, raw_w, raw_v, bound)
    back = transforms.spline_inverse(y.data, raw_w, raw_v, bound)
    return _result("inverse/spline", float(np.abs(back - x).max()), LAYER_TOL,
                   f"{n} elements incl. out-of-bound")


def check_invconv_inverse(rng: np.random.Generator, n_frames: int = 1250,
                          dim: int = 8) -> CheckResult:
    x = rng.normal(size=(n_frames, dim))
    w = transforms.random_orthogonal(dim, rng) + 0.05 * rng.normal(size=(dim, dim))
    with engine.no_grad():
        y, _ = transforms.invconv_forward(x, w)
    back = transforms.invconv_inverse(y.data, w)
    return _result("inverse/invconv", float(np.abs(back - x).max()), LAYER_TOL,
                   f"{n_frames * dim} elements")


def check_reverse_inverse(rng: np.random.Generator, n: int = 10_000) -> CheckResult:
    x = rng.normal(size=(n // 100, 100))
    twice = np.stack([transforms.reverse_time(transforms.reverse_time(r)) for r in x])
    return _result("inverse/reverse", float(np.abs(twice - x).max()), 0.0 + LAYER_TOL,
                   f"{x.size} elements")


def _tiny_config(kind: str, coupling: str | None = None, vocab: int = 8) -> ModelConfig:
    cfg = ModelConfig.for_kind(kind, feature="f0", context_channels=16, ctx_proj=8,
                               predictor_width=16, lstm_hidden=12, clf_hidden=8,
                               vocab_size=vocab)
    if coupling is not None:
        cfg.coupling = coupling
    cfg.validate()
    return cfg


def _model_and_batches(kind: str, rng: np.random.Generator, coupling: str | None = None,
                       n_utts: int = 40, perturb: float = 0.05):
    synth = SynthConfig(seed=int(rng.integers(2**31)), n_utterances=n_utts,
                        min_frames=120, max_frames=180, vocab_size=8)
    corpus = gen_corpus(synth)
    cfg = _tiny_config(kind, coupling)
    prepared = [prepare_utterance(u, t, p, cfg) for u, t, p in corpus]
    model = build_model(cfg, seed=int(rng.integers(2**31)))
    for p in model.parameters().values():
        p.data = p.data + perturb * rng.standard_normal(p.data.shape)
    return model, make_batches(prepared, cfg, batch_size=6)


def _model_roundtrip(model, batches) -> tuple[float, int]:
    worst, count = 0.0, 0
    for batch in batches:
        with engine.no_grad():
            _, ctxp = model._context(batch.frame_phones, batch.voiced)
            x = model.build_x(batch)
            z, _ = model.forward(x, ctxp, batch)
        back = model._invert_latent(z.data, ctxp.data, batch.group_lengths)
        for i, length in enumerate(batch.group_lengths):
            worst = max(worst, float(np.abs(back[i, :length] - x.data[i, :length]).max()))
            count += length * x.data.shape[-1]
    return worst, count


def check_bipartite_inverse(rng: np.random.Generator) -> CheckResult:
    model, batches = _model_and_batches("bgap", rng)
    worst, count = _model_roundtrip(model, batches)
    return _result("inverse/bipartite-flow", worst, MODEL_TOL, f"{count} elements")


def check_autoregressive_inverse(rng: np.random.Generator) -> CheckResult:
    model, batches = _model_and_batches("agap", rng)
    worst, count = _model_roundtrip(model, batches)
    return _result("inverse/autoregressive-flow", worst, MODEL_TOL, f"{count} elements")


def invertibility_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [
        check_affine_inverse(rng),
        check_spline_inverse(rng),
        check_invconv_inverse(rng),
        check_reverse_inverse(rng),
        check_bipartite_inverse(rng),
        check_autoregressive_inverse(rng),
    ]


# -- log-determinant vs finite differences -------------------------------------


def _fd_logdet(f, x: np.ndarray, eps: float = 1e-6) -> float:
    """log |det J| of vector map ``f`` at ``x`` by central differences."""
    d = x.size
    jac = np.empty((d, d))
    for j in range(d):
        hi = x.copy()
        lo = x.copy()
        hi[j] += eps
        lo[j] -= eps
        jac[:, j] = (f(hi) - f(lo)) / (2.0 * eps)
    sign, logdet = np.linalg.slogdet(jac)
    if sign == 0.0:
        raise CheckFailure("finite-difference Jacobian is singular")
    return float(logdet)


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def check_affine_logdet(rng: np.random.Generator, trials: int = 100,
                        dim: int = 5) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        scale = np.exp(rng.uniform(-1.5, 1.5, size=dim))
        bias = rng.uniform(-2.0, 2.0, size=dim)
        x = rng.uniform(-3.0, 3.0, size=dim)
        with engine.no_grad():
            _, logdet = transforms.affine_forward(x, scale, bias)
            fd = _fd_logdet(lambda v: transforms.affine_forward(v, scale, bias)[0].data, x)
        worst = max(worst, _rel_err(float(logdet.data), fd))
    return _result("logdet/affine", worst, AFFINE_LOGDET_TOL, f"{trials} trials dim {dim}")


def check_spline_logdet(rng: np.random.Generator, trials: int = 100,
                        dim: int = 4, bound: float = 3.0, bins: int = 24) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        raw_w = rng.normal(0.0, 1.0, size=(dim, bins))
        raw_v = rng.normal(0.0, 1.0, size=(dim, bins + 1))
        x = rng.uniform(-0.9 * bound, 0.9 * bound, size=dim)
        with engine.no_grad():
            _, logdet = transforms.spline_forward(x, raw_w, raw_v, bound)
            fd = _fd_logdet(lambda v: transforms.spline_forward(v, raw_w, raw_v, bound)[0].data, x)
        worst = max(worst, _rel_err(float(logdet.data), fd))
    return _result("logdet/spline", worst, SPLINE_LOGDET_TOL, f"{trials} trials dim {dim}")


def check_invconv_logdet(rng: np.random.Generator, trials: int = 100,
                         dim: int = 6, n_frames: int = 2) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        w = transforms.random_orthogonal(dim, rng) + 0.1 * rng.normal(size=(dim, dim))
        x = rng.normal(size=(n_frames, dim))
        with engine.no_grad():
            _, logdet = transforms.invconv_forward(x, w)
            fd = _fd_logdet(
                lambda v: transforms.invconv_forward(v.reshape(n_frames, dim), w)[0].data.reshape(-1),
                x.reshape(-1),
            )
        worst = max(worst, _rel_err(float(logdet.data), fd))
    return _result("logdet/invconv", worst, INVCONV_LOGDET_TOL,
                   f"{trials} trials dim {dim} x {n_frames} frames")


def logdet_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [
        check_affine_logdet(rng),
        check_spline_logdet(rng),
        check_invconv_logdet(rng),
    ]


# -- end-to-end gradient checks ------------------------------------------------

GRAD_CONFIGS = (
    ("bipartite-affine", "bgap", "affine"),
    ("bipartite-spline", "bgap", "spline"),
    ("autoregressive-affine", "agap", "affine"),
    ("autoregressive-spline", "agap", "spline"),
)


def check_gradients(name: str, kind: str, coupling: str, seed: int,
                    max_coords: int = 12) -> CheckResult:
    rng = np.random.default_rng(seed)
    synth = SynthConfig(seed=int(rng.integers(2**31)), n_utterances=2,
                        min_frames=24, max_frames=32, vocab_size=8)
    corpus = gen_corpus(synth)
    cfg = _tiny_config(kind, coupling)
    prepared = [prepare_utterance(u, t, p, cfg) for u, t, p in corpus]
    batch = make_batches(prepared, cfg, batch_size=2)[0]
    model = build_model(cfg, seed=int(rng.integers(2**31)))
    # nudge away from the identity initialization so the gradient is generic
    for p in model.parameters().values():
        p.data = p.data + 0.05 * rng.standard_normal(p.data.shape)
    # larger step + Richardson keeps finite-difference truncation well below
    # the tolerance; the denominator floor covers coordinates whose true
    # gradient is smaller than the difference noise itself (about
    # machine-eps * |loss| / eps ~ 1e-12 here), where no finite difference
    # can certify a relative error
    report = engine.grad_check(lambda: model.loss(batch)[0], model.parameters(),
                               eps=1e-3, max_coords=max_coords, rng=rng,
                               richardson=True, floor=1e-7)
    detail = f"{report.checked} coords, {report.skipped_kinks} kink-skipped"
    return _result(f"grad/{name}", report.max_rel_err, GRAD_TOL, detail)


def gradient_suite(seed: int = 0, max_coords: int = 12) -> list[CheckResult]:
    return [check_gradients(name, kind, coupling, seed=seed + i, max_coords=max_coords)
            for i, (name, kind, coupling) in enumerate(GRAD_CONFIGS)]


def run_all_checks(seed: int = 0) -> list[CheckResult]:
    return invertibility_suite(seed) + logdet_suite(seed) + gradient_suite(seed)
