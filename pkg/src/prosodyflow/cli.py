"""Command-line entry point.

Subcommands: ``gen`` (synthetic corpus), ``prep`` (preprocessing inspection),
``train``, ``sample``, ``eval`` (metric report with figures), ``check``
(numerical verification suites).  Every output directory receives a
``manifest.json`` recording the tool version, the exact configuration, the
seed, digests of the inputs consumed, and digests of the artifacts written.

Exit codes: 0 on success, 1 when a verification or training run fails,
2 on usage or data errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__, checks, engine
from .corpus import SynthConfig, gen_corpus, gen_reference_moments
from .errors import CheckFailure, DataError, ProsodyFlowError, TrainingError
from .fileio import (SequenceTrack, load_corpus, sha256_file, write_manifest,
                     write_moments_csv, write_phonemes, write_report, write_track,
                     write_violin_csv)
from .metrics import enr as enr_metric
from .metrics import moments, to_midi, vde as vde_metric, vfe as vfe_metric
from .models import (ModelConfig, build_model, channels_to_track, load_model,
                     make_batch, prepare_utterance)
from .training import TrainConfig, fit

MODEL_FLAGS = ("feature", "coupling", "aux", "filler", "group_size", "n_steps",
               "spline_bins", "spline_bound", "context_channels", "ctx_proj",
               "predictor_width", "lstm_hidden", "clf_hidden", "vocab_size")


def _fail_usage(message: str) -> "SystemExit":
    print(f"error: {message}", file=sys.stderr)
    return SystemExit(2)


def _ensure_out(path: str, force: bool) -> None:
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise _fail_usage(f"output directory {path} is not empty (use --force to reuse)")
    os.makedirs(path, exist_ok=True)


def _apply_config_file(args: argparse.Namespace) -> None:
    """Values from --config <json> take precedence over command-line flags."""
    if not getattr(args, "config", None):
        return
    try:
        with open(args.config) as fh:
            overrides = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise _fail_usage(f"cannot read config file {args.config}: {exc}")
    if not isinstance(overrides, dict):
        raise _fail_usage(f"{args.config}: config file must hold a JSON object")
    for key, value in overrides.items():
        if not hasattr(args, key):
            raise _fail_usage(f"{args.config}: unknown config key {key!r}")
        setattr(args, key, value)


def _hash_files(paths: dict[str, str]) -> dict[str, str]:
    return {label: sha256_file(path) for label, path in sorted(paths.items())}


def _corpus_digests(corpus_dir: str) -> dict[str, str]:
    names = sorted(n for n in os.listdir(corpus_dir)
                   if n.endswith(".track.csv") or n.endswith(".phones.json"))
    return {n: sha256_file(os.path.join(corpus_dir, n)) for n in names}


def _model_config_from_args(args: argparse.Namespace, corpus) -> ModelConfig:
    overrides = {}
    for name in MODEL_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if overrides.get("vocab_size", None) == 0:
        max_id = max(int(p.ids.max()) for _, _, p in corpus)
        overrides["vocab_size"] = max_id + 1
    config = ModelConfig.for_kind(args.model, **overrides)
    config.voiced_context = not args.no_voiced_context
    for warning in config.validate():
        print(f"warning: {warning}", file=sys.stderr)
    return config


# -- gen -----------------------------------------------------------------------


def cmd_gen(args: argparse.Namespace) -> int:
    _apply_config_file(args)
    synth = SynthConfig(
        seed=args.seed, n_utterances=args.utterances,
        min_frames=args.min_frames, max_frames=args.max_frames,
        voiced_run_mean=args.voiced_run_mean, unvoiced_run_mean=args.unvoiced_run_mean,
        f0_base_low=args.f0_base_low, f0_base_high=args.f0_base_high,
        frame_rate=args.frame_rate, vocab_size=args.vocab_size,
        ambiguous_fraction=args.ambiguous_fraction,
    )
    synth.validate()
    _ensure_out(args.out, args.force)
    corpus = gen_corpus(synth)
    artifacts = []
    for utt_id, track, phones in corpus:
        write_track(os.path.join(args.out, f"{utt_id}.track.csv"), track)
        write_phonemes(os.path.join(args.out, f"{utt_id}.phones.json"), phones)
        artifacts += [f"{utt_id}.track.csv", f"{utt_id}.phones.json"]
    from . import plots
    plots.plot_corpus_overview([(u, t) for u, t, _ in corpus],
                               os.path.join(args.out, "corpus_overview.png"))
    artifacts.append("corpus_overview.png")
    write_manifest(args.out, "gen", vars_config(synth), args.seed,
                   inputs={}, artifacts=artifacts, version=__version__)
    print(f"wrote {len(corpus)} utterances to {args.out}")
    return 0


def vars_config(obj) -> dict:
    d = dict(vars(obj))
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


# -- prep ----------------------------------------------------------------------


def cmd_prep(args: argparse.Namespace) -> int:
    _apply_config_file(args)
    corpus = load_corpus(args.corpus)
    ids = [u for u, _, _ in corpus]
    utt_id = args.utt or ids[0]
    if utt_id not in ids:
        raise DataError(f"utterance {utt_id} not found in {args.corpus}")
    config = _model_config_from_args(args, corpus)
    _ensure_out(args.out, args.force)
    _, track, phones = corpus[ids.index(utt_id)]
    prep = prepare_utterance(utt_id, track, phones, config)
    model = build_model(config, seed=args.seed)
    batch = make_batch([prep], config)
    with engine.no_grad():
        x = model.build_x(batch)
    channels = x.data[0].reshape(-1, config.frame_dims)[: track.n_frames]

    csv_path = os.path.join(args.out, "prep_channels.csv")
    with open(csv_path, "w") as fh:
        fh.write("t," + ",".join(f"ch{d}" for d in range(channels.shape[1])) + ",voiced\n")
        for t in range(channels.shape[0]):
            vals = ",".join(repr(float(v)) for v in channels[t])
            fh.write(f"{t},{vals},{int(track.voiced[t])}\n")
    from . import plots
    plots.plot_channels(channels, track.voiced, os.path.join(args.out, "prep_channels.png"),
                        title=f"{utt_id} ({config.feature}/{config.aux}/{config.filler})")
    write_manifest(args.out, "prep", config.to_dict(), args.seed,
                   inputs=_hash_files({
                       f"{utt_id}.track.csv": os.path.join(args.corpus, f"{utt_id}.track.csv"),
                       f"{utt_id}.phones.json": os.path.join(args.corpus, f"{utt_id}.phones.json"),
                   }),
                   artifacts=["prep_channels.csv", "prep_channels.png"],
                   version=__version__)
    print(f"wrote preprocessed channels for {utt_id} to {args.out}")
    return 0


# -- train ---------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    _apply_config_file(args)
    corpus = load_corpus(args.corpus)
    config = _model_config_from_args(args, corpus)
    _ensure_out(args.out, args.force)
    train_cfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                            seed=args.seed, nll_weight=args.nll_weight,
                            bce_weight=args.bce_weight, grad_clip=args.grad_clip,
                            monitor_window=args.monitor_window,
                            checkpoint_every=args.checkpoint_every,
                            decay_tail=args.decay_tail, lr_min=args.lr_min)
    with open(os.path.join(args.out, "model_config.json"), "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    resume = None
    if args.resume:
        model, payload = load_model(args.resume)
        if model.config.to_dict() != config.to_dict():
            raise DataError("--resume checkpoint was trained with a different model config")
        resume = {"optimizer": payload["optimizer"], "rng_state": payload["rng_state"],
                  "step": payload["step"]}
    else:
        model = build_model(config, seed=args.seed)

    prepared = [prepare_utterance(u, t, p, config) for u, t, p in corpus]
    result = fit(model, prepared, train_cfg, out_dir=args.out, resume=resume)

    from . import plots
    plots.plot_history(result.history, os.path.join(args.out, "monitor.png"))
    artifacts = ["model_config.json", "history.csv", "checkpoint_latest.json",
                 "checkpoint_final.json", "monitor.png"]
    inputs = _corpus_digests(args.corpus)
    if args.resume:
        inputs["resume_checkpoint"] = sha256_file(args.resume)
    write_manifest(args.out, "train",
                   {"model": config.to_dict(), "train": vars_config(train_cfg)},
                   args.seed, inputs=inputs, artifacts=artifacts, version=__version__)
    print(f"trained {train_cfg.steps} steps; final loss {result.history[-1][1]:.4f}, "
          f"rolling monitor {result.monitor:.4f} (target 0.5)")
    return 0


# -- sample ----------------------------------------------------------------------


def cmd_sample(args: argparse.Namespace) -> int:
    _apply_config_file(args)
    model, _ = load_model(args.checkpoint)
    corpus = load_corpus(args.corpus)
    if args.utterances > 0:
        corpus = corpus[: args.utterances]
    sigma = args.sigma
    if sigma is None:
        sigma = 0.3 if model.config.feature == "energy" else 1.0
    _ensure_out(args.out, args.force)

    artifacts = []
    children = np.random.SeedSequence(args.seed).spawn(len(corpus))
    first_overlay = None
    for (utt_id, track, phones), child in zip(corpus, children):
        rng = np.random.default_rng(child)
        samples, v_pred = model.sample_utterance(phones, track.n_frames,
                                                 n_samples=args.num_samples,
                                                 sigma=sigma, rng=rng)
        tracks = [channels_to_track(samples[k], model.config, v_pred, track.frame_rate)
                  for k in range(samples.shape[0])]
        for k, sampled in enumerate(tracks):
            name = f"{utt_id}.s{k:02d}.track.csv"
            write_track(os.path.join(args.out, name), sampled)
            artifacts.append(name)
        if first_overlay is None:
            first_overlay = (utt_id, track, tracks)
    from . import plots
    utt_id, ref, tracks = first_overlay
    plots.plot_track_overlay(tracks[: min(8, len(tracks))],
                             os.path.join(args.out, "sample_overlay.png"),
                             ref=ref, title=f"{utt_id}: {len(tracks)} samples, sigma {sigma}")
    artifacts.append("sample_overlay.png")
    inputs = _corpus_digests(args.corpus)
    inputs["checkpoint"] = sha256_file(args.checkpoint)
    write_manifest(args.out, "sample",
                   {"num_samples": args.num_samples, "sigma": sigma,
                    "model": model.config.to_dict()},
                   args.seed, inputs=inputs, artifacts=artifacts, version=__version__)
    print(f"wrote {len(artifacts) - 1} sampled tracks for {len(corpus)} utterances to {args.out}")
    return 0


# -- eval ------------------------------------------------------------------------


def _collect_samples(samples_dir: str) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for name in sorted(os.listdir(samples_dir)):
        if not name.endswith(".track.csv"):
            continue
        stem = name[: -len(".track.csv")]
        base, dot, tag = stem.rpartition(".")
        if dot and tag.startswith("s") and tag[1:].isdigit():
            groups.setdefault(base, []).append(os.path.join(samples_dir, name))
    return groups


def cmd_eval(args: argparse.Namespace) -> int:
    from .fileio import read_track

    _apply_config_file(args)
    ref_corpus = load_corpus(args.ref)
    groups = _collect_samples(args.samples)
    missing = [u for u, _, _ in ref_corpus if u not in groups]
    have = [(u, t) for u, t, _ in ref_corpus if u in groups]
    if not have:
        raise DataError(f"no sampled tracks in {args.samples} match utterances in {args.ref}")
    if missing:
        print(f"warning: {len(missing)} reference utterances have no samples "
              f"(first: {missing[0]})", file=sys.stderr)
    _ensure_out(args.out, args.force)

    per_utt: dict[str, dict[str, list[float]]] = {}
    violin_rows: list[tuple[str, str, float]] = []
    sampled_midi: list[np.ndarray] = []
    vfe_frames: dict[str, int] = {}
    for utt_id, ref in have:
        vals: dict[str, list[float]] = {"vde": [], "vfe": [], "enr": []}
        for path in groups[utt_id]:
            sample = read_track(path)
            if sample.n_frames != ref.n_frames:
                raise DataError(f"{path}: {sample.n_frames} frames, reference has {ref.n_frames}")
            if sample.voiced.any():
                vals["vde"].append(vde_metric(sample.voiced, ref.voiced))
                common = (sample.voiced > 0) & (ref.voiced > 0)
                if common.any():
                    err, n_used = vfe_metric(sample.f0_hz, ref.f0_hz, ref.voiced,
                                             pred_mask=sample.voiced)
                    vals["vfe"].append(err)
                    vfe_frames[utt_id] = vfe_frames.get(utt_id, 0) + n_used
                v_mask = sample.voiced > 0
                sampled_midi.append(to_midi(sample.f0_hz[v_mask]))
            if sample.energy.any():
                vals["enr"].append(enr_metric(sample.energy, ref.energy))
        per_utt[utt_id] = vals
        for metric, values in vals.items():
            violin_rows += [(utt_id, metric, v) for v in values]

    report: dict[str, dict] = {}
    for metric in ("vde", "vfe", "enr"):
        utt_means = {u: float(np.mean(v[metric])) for u, v in per_utt.items() if v[metric]}
        if utt_means:
            report[metric] = {"mean": float(np.mean(list(utt_means.values()))),
                              "per_utterance": utt_means}
            if metric == "vfe":
                report[metric]["frames_used"] = vfe_frames
    moment_rows = {"reference": gen_reference_moments([(u, t, None) for u, t in have])}
    if sampled_midi:
        pooled = np.concatenate(sampled_midi)
        if pooled.size >= 4 and np.std(pooled) > 0:
            moment_rows["sampled"] = moments(pooled)
            ref_m, smp_m = moment_rows["reference"], moment_rows["sampled"]
            report["moments"] = {
                "reference": dict(zip(("mu1", "mu2", "mu3", "mu4"), ref_m)),
                "sampled": dict(zip(("mu1", "mu2", "mu3", "mu4"), smp_m)),
                "abs_delta": {k: abs(a - b) for k, a, b in
                              zip(("mu1", "mu2", "mu3", "mu4"), ref_m, smp_m)},
            }

    write_report(os.path.join(args.out, "report.json"), report)
    write_violin_csv(os.path.join(args.out, "violin.csv"), violin_rows)
    write_moments_csv(os.path.join(args.out, "moments.csv"), moment_rows)
    from . import plots
    plots.plot_violin({m: [v for _, mm, v in violin_rows if mm == m] for m in ("vde", "vfe", "enr")},
                      os.path.join(args.out, "violin.png"), title="per-sample metric distributions")
    inputs = _corpus_digests(args.ref)
    for utt_id in sorted(groups):
        for path in groups[utt_id]:
            inputs[os.path.basename(path)] = sha256_file(path)
    write_manifest(args.out, "eval", {"ref": args.ref, "samples": args.samples}, None,
                   inputs=inputs,
                   artifacts=["report.json", "violin.csv", "moments.csv", "violin.png"],
                   version=__version__)
    summary = ", ".join(f"{m} {report[m]['mean']:.4f}" for m in ("vde", "vfe", "enr") if m in report)
    print(f"evaluated {len(have)} utterances: {summary}")
    return 0


# -- check -----------------------------------------------------------------------


def cmd_check(args: argparse.Namespace) -> int:
    _apply_config_file(args)
    suites = {
        "invert": checks.invertibility_suite,
        "logdet": checks.logdet_suite,
        "grad": checks.gradient_suite,
    }
    if args.suite == "all":
        results = checks.run_all_checks(seed=args.seed)
    else:
        results = suites[args.suite](seed=args.seed)
    for r in results:
        print(r.line())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "check_report.json"), "w") as fh:
            json.dump([vars(r) for r in results], fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_manifest(args.out, "check", {"suite": args.suite}, args.seed,
                       inputs={}, artifacts=["check_report.json"], version=__version__)
    failed = [r for r in results if not r.passed]
    if failed:
        raise CheckFailure(f"{len(failed)} of {len(results)} checks failed")
    print(f"all {len(results)} checks passed")
    return 0


# -- parser ----------------------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=("bgap", "agap"), default="bgap",
                   help="flow architecture")
    p.add_argument("--feature", choices=("f0", "energy"), default=None)
    p.add_argument("--coupling", choices=("hybrid", "affine", "spline"), default=None)
    p.add_argument("--aux", choices=("diff", "cwt"), default=None,
                   help="companion channels for scalar F0 (diff) or wavelet encoding (cwt)")
    p.add_argument("--filler", choices=("dtx", "bias", "interp", "none"), default=None,
                   help="unvoiced-region filler for the F0 channel")
    p.add_argument("--group-size", type=int, default=None, dest="group_size")
    p.add_argument("--n-steps", type=int, default=None, dest="n_steps")
    p.add_argument("--bins", type=int, default=None, dest="spline_bins")
    p.add_argument("--bound", type=float, default=None, dest="spline_bound")
    p.add_argument("--context-channels", type=int, default=None, dest="context_channels")
    p.add_argument("--ctx-proj", type=int, default=None, dest="ctx_proj")
    p.add_argument("--predictor-width", type=int, default=None, dest="predictor_width")
    p.add_argument("--lstm-hidden", type=int, default=None, dest="lstm_hidden")
    p.add_argument("--clf-hidden", type=int, default=None, dest="clf_hidden")
    p.add_argument("--vocab-size", type=int, default=None, dest="vocab_size",
                   help="phoneme vocabulary size (0 = infer from the corpus)")
    p.add_argument("--no-voiced-context", action="store_true",
                   help="disable the voiced-aware context merge and classifier")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None,
                   help="JSON file whose values override the flags")
    p.add_argument("--force", action="store_true",
                   help="write into a non-empty output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prosodyflow",
        description="Normalizing-flow toolkit for discontinuous prosody time series.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--utterances", type=int, default=200)
    g.add_argument("--min-frames", type=int, default=150, dest="min_frames")
    g.add_argument("--max-frames", type=int, default=300, dest="max_frames")
    g.add_argument("--voiced-run-mean", type=float, default=25.0, dest="voiced_run_mean")
    g.add_argument("--unvoiced-run-mean", type=float, default=8.0, dest="unvoiced_run_mean")
    g.add_argument("--f0-base-low", type=float, default=110.0, dest="f0_base_low")
    g.add_argument("--f0-base-high", type=float, default=280.0, dest="f0_base_high")
    g.add_argument("--frame-rate", type=float, default=200.0, dest="frame_rate")
    g.add_argument("--vocab-size", type=int, default=64, dest="vocab_size")
    g.add_argument("--ambiguous-fraction", type=float, default=0.0, dest="ambiguous_fraction",
                   help="fraction of runs drawing their phoneme from a pool shared "
                        "between voiced and unvoiced runs")
    _add_common(g)
    g.set_defaults(func=cmd_gen)

    pr = sub.add_parser("prep", help="inspect preprocessing for one utterance")
    pr.add_argument("--corpus", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--utt", default=None, help="utterance id (default: first)")
    pr.add_argument("--seed", type=int, default=0)
    _add_model_flags(pr)
    _add_common(pr)
    pr.set_defaults(func=cmd_prep)

    t = sub.add_parser("train", help="train a flow on a corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--batch-size", type=int, default=8, dest="batch_size")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--nll-weight", type=float, default=1.0, dest="nll_weight")
    t.add_argument("--bce-weight", type=float, default=1.0, dest="bce_weight")
    t.add_argument("--grad-clip", type=float, default=10.0, dest="grad_clip")
    t.add_argument("--monitor-window", type=int, default=500, dest="monitor_window")
    t.add_argument("--checkpoint-every", type=int, default=1000, dest="checkpoint_every")
    t.add_argument("--decay-tail", type=float, default=0.3, dest="decay_tail",
                   help="fraction of the run spent on the cosine learning-rate taper")
    t.add_argument("--lr-min", type=float, default=1e-5, dest="lr_min",
                   help="learning rate the taper lands on")
    t.add_argument("--resume", default=None, help="checkpoint_latest.json to continue from")
    _add_model_flags(t)
    _add_common(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="sample tracks from a trained model")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", required=True,
                   help="corpus supplying phoneme sequences and frame counts")
    s.add_argument("--out", required=True)
    s.add_argument("--num-samples", type=int, default=30, dest="num_samples")
    s.add_argument("--utterances", type=int, default=0,
                   help="limit to the first N utterances (0 = all)")
    s.add_argument("--sigma", type=float, default=None,
                   help="latent temperature (default 1.0, or 0.3 for energy models)")
    s.add_argument("--seed", type=int, default=0)
    _add_common(s)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="compare sampled tracks against a reference corpus")
    e.add_argument("--ref", required=True)
    e.add_argument("--samples", required=True)
    e.add_argument("--out", required=True)
    _add_common(e)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="run numerical verification suites")
    c.add_argument("--suite", choices=("all", "invert", "logdet", "grad"), default="all")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default=None, help="optional directory for the JSON report")
    _add_common(c)
    c.set_defaults(func=cmd_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        if exc.code is None:
            return 0
        return exc.code if isinstance(exc.code, int) else 2
    except (CheckFailure, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ProsodyFlowError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
