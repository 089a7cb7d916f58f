"""Command-line entry point: ``mmgap {train,estimate,curve,adaptive-fit,benchmark}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, MMGError
from .estimator import NATS_PER_BIT, VARIANTS, default_grid, estimate, fit_adaptive, mmse_curve
from .harness import (CURVE_HEADER, PROFILES, SCHEMA_VERSION, curve_rows, fit_record, load_manifest,
                      load_sampling, run_benchmark, run_dir, train_cell, write_csv, write_json)
from .channel import SamplingConfig
from .tasks import load_task, parse_task_name
from .training import TrainRun

log = logging.getLogger("mmgap")


def parse_seeds(text):
    """``"0,1,2"`` or ``"0-4"`` (inclusive) or a mix such as ``"0-2,7"``."""
    seeds = []
    try:
        for part in text.split(","):
            if "-" in part:
                a, b = part.split("-")
                seeds.extend(range(int(a), int(b) + 1))
            else:
                seeds.append(int(part))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc
    return seeds


def _variants(values):
    if not values:
        return None
    out = [v for item in values for v in item.split(",") if v]
    return out


def _overrides(args):
    ov = {}
    if getattr(args, "profile", None):
        ov["profile"] = args.profile
    if getattr(args, "seeds", None):
        ov["seeds"] = args.seeds
    if getattr(args, "output_dir", None):
        ov["output_dir"] = str(args.output_dir)
    v = _variants(getattr(args, "variant", None))
    if v:
        ov["variants"] = v
    return ov


def _task(value, checkpoint):
    if value is None:
        sibling = Path(checkpoint).parent / "task.json"
        if not sibling.exists():
            raise ConfigError("task: not given and no task.json next to the checkpoint")
        return load_task(sibling)
    p = Path(value)
    return load_task(p) if p.suffix == ".json" and p.exists() else parse_task_name(value)


def _load_model(args):
    path = Path(args.checkpoint)
    if not path.exists():
        raise ConfigError(f"checkpoint: file not found: {path}")
    task = _task(args.task, path)
    run, _ = TrainRun.load(path)
    if (run.mlp.input_dim, run.mlp.cond_dim) != (task.dim_x, task.dim_y):
        raise ConfigError(
            f"task: dimensions ({task.dim_x}, {task.dim_y}) do not match the checkpoint "
            f"({run.mlp.input_dim}, {run.mlp.cond_dim})"
        )
    return run, task


def _test_set(task, args):
    return task.sample(args.test_samples, np.random.default_rng([args.seed, task.seed, 101]))


# ---------------------------------------------------------------- subcommands

def cmd_train(args):
    paths = []
    for m in load_manifest(args.manifest, _overrides(args)):
        write_json(m.output_dir / "runs" / m.task.name / "manifest.resolved.json", m.snapshot())
        for seed in m.seeds:
            train_cell(m, seed)
            p = run_dir(m, seed) / "baseline" / "final_ema.bin"
            paths.append(str(p))
            print(p)
    return 0


def cmd_estimate(args):
    run, task = _load_model(args)
    sampling = load_sampling(args.sampling) if args.sampling else SamplingConfig()
    if args.n_points or args.inference_times:
        sampling = SamplingConfig(**{**asdict(sampling),
                                     **({"n_points": args.n_points} if args.n_points else {}),
                                     **({"inference_times": args.inference_times} if args.inference_times else {})})
    test = _test_set(task, args)
    est = estimate(run.denoiser(), test, sampling,
                   np.random.default_rng([args.seed, task.seed, 303, VARIANTS.index(args.variant)]),
                   args.variant)
    unit = NATS_PER_BIT if args.bits else 1.0
    record = {
        "schema_version": SCHEMA_VERSION,
        "task": task.name,
        "ground_truth_nats": task.ground_truth_nats,
        "variant": est.variant,
        "units": "bits" if args.bits else "nats",
        "mean": est.mean_nats / unit,
        "std": est.std_nats / unit,
        "mean_nats": est.mean_nats,
        "std_nats": est.std_nats,
        "repeats_nats": est.repeats,
        "n_points": est.n_points,
        "inference_times": est.inference_times,
        "sampling": asdict(sampling),
        "seeds": [args.seed],
        "checkpoint": str(args.checkpoint),
    }
    text = json.dumps(record, indent=2, sort_keys=True) + "\n"
    if args.output:
        write_json(args.output, record)
    sys.stdout.write(text)
    return 0


def cmd_curve(args):
    run, task = _load_model(args)
    curve = mmse_curve(run.denoiser(), _test_set(task, args),
                       default_grid(args.points, args.lo, args.hi), args.samples_per_point,
                       np.random.default_rng([args.seed, task.seed, 202]))
    path = write_csv(args.output, CURVE_HEADER, curve_rows(curve))
    print(path)
    return 0


def cmd_adaptive_fit(args):
    run, task = _load_model(args)
    defaults = load_sampling(args.sampling) if args.sampling else SamplingConfig()
    curve = mmse_curve(run.denoiser(), _test_set(task, args),
                       default_grid(args.points, args.lo, args.hi), args.samples_per_point,
                       np.random.default_rng([args.seed, task.seed, 202]))
    fit = fit_adaptive(curve, task.dim_x, defaults, space=args.space)
    if fit.fallback:
        log.warning("no crossings found; writing the default sampling with fallback=true")
    write_json(args.output, fit_record(fit))
    print(args.output)
    return 0


def cmd_benchmark(args):
    manifests = load_manifest(args.suite, _overrides(args))
    report = run_benchmark(manifests, bits=args.bits)
    for row in report.rows:
        print(",".join(row))
    if report.failures:
        log.error("%d cell(s) failed; see %s", len(report.failures), report.paths["failures"])
    return 0


# ---------------------------------------------------------------- parser

def _model_args(p):
    p.add_argument("checkpoint", type=Path, help="checkpoint file (final_ema.bin)")
    p.add_argument("--task", help="task name or task JSON file (default: task.json next to the checkpoint)")
    p.add_argument("--seed", type=int, default=0, help="seed for the test set and Monte-Carlo draws")
    p.add_argument("--test-samples", type=int, default=10000)


def _curve_args(p):
    p.add_argument("--lo", type=float, default=-10.0)
    p.add_argument("--hi", type=float, default=10.0)
    p.add_argument("--points", type=int, default=64)
    p.add_argument("--samples-per-point", type=int, default=4096)


def _run_args(p, variants=True):
    p.add_argument("--profile", choices=PROFILES)
    p.add_argument("--seeds", type=parse_seeds, help="e.g. 0,1,2 or 0-4")
    p.add_argument("--output-dir", type=Path)
    if variants:
        p.add_argument("--variant", action="append", help=f"one or more of {', '.join(VARIANTS)}")


def build_parser():
    ap = argparse.ArgumentParser(prog="mmgap", description="MMSE-gap mutual information estimation")
    ap.add_argument("--version", action="version", version=f"mmgap {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train denoisers for a manifest")
    p.add_argument("manifest", type=Path)
    _run_args(p, variants=False)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("estimate", help="estimate MI from a checkpoint")
    _model_args(p)
    p.add_argument("--variant", choices=VARIANTS, default="gap")
    p.add_argument("--sampling", type=Path, help="sampling file (e.g. from adaptive-fit)")
    p.add_argument("--n-points", type=int)
    p.add_argument("--inference-times", type=int)
    p.add_argument("--bits", action="store_true", help="report mean/std in bits")
    p.add_argument("--output", type=Path)
    p.set_defaults(fn=cmd_estimate)

    p = sub.add_parser("curve", help="export conditional/unconditional MMSE curves as CSV")
    _model_args(p)
    _curve_args(p)
    p.add_argument("--output", type=Path, required=True)
    p.set_defaults(fn=cmd_curve)

    p = sub.add_parser("adaptive-fit", help="fit the adaptive log-SNR proposal from a checkpoint")
    _model_args(p)
    _curve_args(p)
    p.add_argument("--space", choices=("snr-scaled", "x"), default="snr-scaled")
    p.add_argument("--sampling", type=Path, help="default sampling to start from")
    p.add_argument("--output", type=Path, required=True)
    p.set_defaults(fn=cmd_adaptive_fit)

    p = sub.add_parser("benchmark", help="run a suite and write results CSVs")
    p.add_argument("suite", type=Path)
    _run_args(p)
    p.add_argument("--bits", action="store_true", help="write MI columns in bits")
    p.set_defaults(fn=cmd_benchmark)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MMGError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
