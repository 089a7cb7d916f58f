"""Run manifests, benchmark orchestration and the frozen output formats.

Manifest (JSON, ``schema_version`` 1)::

    {"schema_version": 1,
     "task": "1v1-normal-0.75",            # or "tasks": [...] in a benchmark suite
     "profile": "desk",
     "seeds": [0, 1, 2],
     "variants": ["gap", "gap-adaptive"],
     "mlp": {...}, "train": {...}, "optimizer": {...}, "sampling": {...},
     "test_samples": 10000,
     "curve": {"lo": -10, "hi": 10, "points": 64, "samples_per_point": 4096},
     "output_dir": "runs/example"}

Every section is optional except the task(s).  Unknown keys are rejected.
Section values override the chosen profile; the fully resolved manifest is
written next to the outputs as ``manifest.resolved.json``.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .channel import SamplingConfig
from .errors import ConfigError, MMGError
from .estimator import VARIANTS, default_grid, estimate, fit_adaptive, mmse_curve
from .numerics import MlpConfig, OptimizerConfig
from .tasks import TaskSpec, task_from_dict
from .training import TrainConfig, TrainRun, profile_configs, train

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
WORKERS_ENV = "MMGAP_WORKERS"
PROFILES = ("desk", "paper")

RESULTS_HEADER = ["task", "gt", "variant", "mean", "std", "bias"]
PER_SEED_HEADER = ["task", "gt", "variant", "seed", "mean", "std", "n_points", "inference_times",
                   "loc", "scale", "defensive_weight", "fallback"]
CURVE_HEADER = ["log_snr", "cond", "uncond", "gap", "orthogonal"]
FAILURES_HEADER = ["task", "seed", "error"]

_TOP_KEYS = {"schema_version", "task", "tasks", "profile", "seeds", "variants", "mlp", "train",
             "optimizer", "sampling", "test_samples", "curve", "output_dir"}
_CURVE_DEFAULTS = {"lo": -10.0, "hi": 10.0, "points": 64, "samples_per_point": 4096}


def _num(v):
    """Shortest round-tripping text for a float (byte-stable across runs)."""
    return repr(float(v))


# ---------------------------------------------------------------- manifests

@dataclass
class RunManifest:
    task: TaskSpec
    variants: list
    mlp: MlpConfig
    train: TrainConfig
    optimizer: OptimizerConfig
    sampling: SamplingConfig
    seeds: list
    output_dir: Path
    profile: str = "desk"
    test_samples: int = 10000
    curve: dict = field(default_factory=lambda: dict(_CURVE_DEFAULTS))

    def snapshot(self) -> dict:
        tc = asdict(self.train)
        tc.pop("sampling")
        tc.pop("seed")
        return {
            "schema_version": SCHEMA_VERSION,
            "task": {"name": self.task.name, **self.task.to_dict()},
            "profile": self.profile,
            "seeds": list(self.seeds),
            "variants": list(self.variants),
            "mlp": asdict(self.mlp),
            "train": tc,
            "optimizer": asdict(self.optimizer),
            "sampling": asdict(self.sampling),
            "test_samples": self.test_samples,
            "curve": dict(self.curve),
            "output_dir": str(self.output_dir),
        }


def _section(name, cls, values, exclude=()):
    if values is None:
        return {}
    if not isinstance(values, dict):
        raise ConfigError(f"{name}: expected an object")
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
    return dict(values)


def _build(name, fn):
    try:
        return fn()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, MMGError) and str(exc).startswith(name):
            raise
        raise ConfigError(f"{name}: {exc}") from exc


def _check_seeds(seeds):
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds: expected a non-empty list of non-negative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds: values must be distinct")
    return list(seeds)


def _check_variants(variants):
    if isinstance(variants, str):
        variants = [variants]
    if not isinstance(variants, list) or not variants:
        raise ConfigError("variants: expected a non-empty list")
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"variants: unknown {bad}; expected some of {list(VARIANTS)}")
    return list(dict.fromkeys(variants))


def resolve(raw: dict, task_value, overrides=None) -> RunManifest:
    """Resolve one task entry of a parsed manifest into a RunManifest."""
    overrides = overrides or {}
    raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
    profile = raw.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"profile: expected one of {PROFILES}, got {profile!r}")
    task = _build("task", lambda: task_from_dict(task_value))
    mlp0, tc0, oc0 = profile_configs(profile, task)

    mlp_kw = _section("mlp", MlpConfig, raw.get("mlp"), exclude=("input_dim", "cond_dim", "output_dim"))
    tc_kw = _section("train", TrainConfig, raw.get("train"), exclude=("sampling", "seed"))
    oc_kw = _section("optimizer", OptimizerConfig, raw.get("optimizer"))
    sp_kw = _section("sampling", SamplingConfig, raw.get("sampling"))
    mlp = _build("mlp", lambda: replace(mlp0, **mlp_kw))
    sampling = _build("sampling", lambda: replace(tc0.sampling, **sp_kw))
    tc = _build("train", lambda: replace(tc0, sampling=sampling, **tc_kw))
    oc = _build("optimizer", lambda: replace(oc0, **oc_kw))

    curve = raw.get("curve") or {}
    if not isinstance(curve, dict) or set(curve) - set(_CURVE_DEFAULTS):
        raise ConfigError(f"curve: unknown keys {sorted(set(curve) - set(_CURVE_DEFAULTS))}")
    curve = {**_CURVE_DEFAULTS, **curve}
    if curve["points"] < 2 or curve["hi"] <= curve["lo"] or curve["samples_per_point"] < 1:
        raise ConfigError("curve: need points >= 2, hi > lo and samples_per_point >= 1")
    test_samples = raw.get("test_samples", 10000)
    if not isinstance(test_samples, int) or test_samples < 1:
        raise ConfigError("test_samples: expected a positive integer")

    return RunManifest(
        task=task,
        variants=_check_variants(raw.get("variants", ["gap"])),
        mlp=mlp, train=tc, optimizer=oc, sampling=sampling,
        seeds=_check_seeds(raw.get("seeds", [0])),
        output_dir=Path(raw.get("output_dir", "runs")),
        profile=profile,
        test_samples=test_samples,
        curve=curve,
    )


def load_manifest(path_or_dict, overrides=None) -> list[RunManifest]:
    """Parse a manifest (single ``task``) or suite (``tasks`` list) into RunManifests."""
    if isinstance(path_or_dict, dict):
        raw = dict(path_or_dict)
    else:
        path = Path(path_or_dict)
        if not path.exists():
            raise ConfigError(f"manifest: file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"manifest: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError("manifest: expected a JSON object")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"manifest: unknown keys {sorted(unknown)}")
    if ("task" in raw) == ("tasks" in raw):
        raise ConfigError("task: give exactly one of 'task' or 'tasks'")
    entries = [raw["task"]] if "task" in raw else raw["tasks"]
    if not isinstance(entries, list) or not entries:
        raise ConfigError("tasks: expected a non-empty list")
    manifests = [resolve(raw, entry, overrides) for entry in entries]
    names = [m.task.name for m in manifests]
    if len(set(names)) != len(names):
        raise ConfigError("tasks: duplicate task names")
    return manifests


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- one (task, seed) cell

def run_dir(m: RunManifest, seed: int) -> Path:
    return m.output_dir / "runs" / m.task.name / f"seed_{seed}"


def _test_set(m: RunManifest, seed):
    return m.task.sample(m.test_samples, np.random.default_rng([seed, m.task.seed, 101]))


def _grid(m: RunManifest):
    return default_grid(m.curve["points"], m.curve["lo"], m.curve["hi"])


def train_cell(m: RunManifest, seed: int) -> TrainRun:
    tc = replace(m.train, seed=seed)
    run = train(m.task, m.mlp, tc, m.optimizer, run_dir(m, seed) / "baseline")
    write_json(run_dir(m, seed) / "baseline" / "task.json", {"schema_version": SCHEMA_VERSION,
                                                             "name": m.task.name, **m.task.to_dict()})
    return run


def run_cell(m: RunManifest, seed: int) -> dict:
    """Train, optionally refit adaptively, and estimate every requested variant."""
    out = {"seed": seed, "rows": [], "curve": None}
    started = time.perf_counter()
    baseline = train_cell(m, seed)
    test = _test_set(m, seed)
    curve = None
    if any(v.endswith("adaptive") for v in m.variants) or seed == m.seeds[0]:
        curve = mmse_curve(baseline.denoiser(), test, _grid(m), m.curve["samples_per_point"],
                           np.random.default_rng([seed, m.task.seed, 202]))
    if seed == m.seeds[0]:
        out["curve"] = curve_rows(curve)

    models = {"baseline": (baseline, m.sampling, None)}
    if any(v.endswith("adaptive") for v in m.variants):
        fit = fit_adaptive(curve, m.task.dim_x, m.sampling)
        write_json(run_dir(m, seed) / "adaptive" / "sampling.json", fit_record(fit))
        if fit.fallback:
            final = baseline
        else:
            final = train(m.task, m.mlp, replace(m.train, seed=seed, sampling=fit.sampling),
                          m.optimizer, run_dir(m, seed) / "adaptive")
        models["adaptive"] = (final, fit.sampling, fit)

    for i, variant in enumerate(VARIANTS):
        if variant not in m.variants:
            continue
        run, sampling, fit = models["adaptive" if variant.endswith("adaptive") else "baseline"]
        est = estimate(run.denoiser(), test, sampling,
                       np.random.default_rng([seed, m.task.seed, 303, i]), variant)
        out["rows"].append({
            "variant": variant, "mean": est.mean_nats, "std": est.std_nats,
            "n_points": est.n_points, "inference_times": est.inference_times,
            "loc": sampling.loc, "scale": sampling.scale,
            "defensive_weight": sampling.defensive_weight,
            "fallback": bool(fit.fallback) if fit is not None else False,
        })
    out["seconds"] = time.perf_counter() - started
    return out


def _cell_worker(args):
    m, seed = args
    try:
        return run_cell(m, seed)
    except Exception as exc:  # one failed cell must not stop the suite
        log.error("cell %s seed %s failed: %s", m.task.name, seed, exc)
        return {"seed": seed, "error": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc()}


def worker_count(default=1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw == "":
        return default
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV}: expected an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV}: must be >= 1")
    return n


# ---------------------------------------------------------------- records and CSVs

def fit_record(fit) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "sampling": asdict(fit.sampling),
        "fallback": fit.fallback,
        "half_crossing": fit.half_crossing,
        "quarter_crossing": fit.quarter_crossing,
        "space": fit.space,
    }


def load_sampling(path) -> SamplingConfig:
    """Read a sampling file: either a fit record or a bare SamplingConfig object."""
    d = json.loads(Path(path).read_text())
    if "sampling" in d:
        d = d["sampling"]
    kw = _section("sampling", SamplingConfig, d)
    return _build("sampling", lambda: SamplingConfig(**kw))


def curve_rows(curve):
    return [[_num(t), _num(c), _num(u), _num(u - c), _num(o)]
            for t, c, u, o in zip(curve.grid, curve.cond, curve.uncond, curve.orthogonal)]


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def summarize(per_seed):
    """Mean over seeds; std over seeds (ddof=1), or over repeats for a single seed."""
    means = np.array([r["mean"] for r in per_seed])
    if len(means) == 0:
        return float("nan"), float("nan")
    mean = float(np.sum(means) / len(means))
    if len(means) > 1:
        std = float(np.std(means, ddof=1))
    else:
        std = float(per_seed[0]["std"])
    return mean, std


@dataclass
class BenchmarkReport:
    rows: list          # (task, gt, variant, mean, std, bias)
    per_seed: list
    failures: list
    metadata: dict
    paths: dict


def run_benchmark(manifests: list[RunManifest], bits=False, workers=None) -> BenchmarkReport:
    """Run every (task, seed) cell, then assemble the report single-threaded."""
    if not manifests:
        raise ConfigError("tasks: nothing to run")
    out_dir = manifests[0].output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    workers = worker_count() if workers is None else workers
    jobs = [(m, s) for m in manifests for s in m.seeds]
    started = time.time()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell_worker, jobs))
    else:
        results = [_cell_worker(j) for j in jobs]

    unit = np.log(2.0) if bits else 1.0
    rows, per_seed_rows, failures, curve_paths, seconds = [], [], [], {}, {}
    by_task = {}
    for (m, seed), res in zip(jobs, results):
        by_task.setdefault(m.task.name, (m, []))[1].append(res)
    for name, (m, results_m) in by_task.items():
        write_json(out_dir / "runs" / name / "manifest.resolved.json", m.snapshot())
        gt = m.task.ground_truth_nats
        seconds[name] = [round(r["seconds"], 1) for r in results_m if "seconds" in r]
        for res in results_m:
            if "error" in res:
                failures.append([name, str(res["seed"]), res["error"]])
            elif res["curve"] is not None:
                curve_paths[name] = str(write_csv(out_dir / "curves" / f"{name}.csv", CURVE_HEADER,
                                                  res["curve"]))
        for variant in m.variants:
            cells = [dict(r, seed=res["seed"]) for res in results_m if "error" not in res
                     for r in res["rows"] if r["variant"] == variant]
            for c in cells:
                per_seed_rows.append([name, _num(gt / unit), variant, str(c["seed"]), _num(c["mean"] / unit),
                                      _num(c["std"] / unit), str(c["n_points"]), str(c["inference_times"]),
                                      _num(c["loc"]), _num(c["scale"]), _num(c["defensive_weight"]),
                                      str(c["fallback"]).lower()])
            mean, std = summarize(cells)
            rows.append([name, _num(gt / unit), variant, _num(mean / unit), _num(std / unit),
                         _num(mean / unit - gt / unit)])

    paths = {
        "results": str(write_csv(out_dir / "results.csv", RESULTS_HEADER, rows)),
        "per_seed": str(write_csv(out_dir / "per_seed.csv", PER_SEED_HEADER, per_seed_rows)),
        "failures": str(write_csv(out_dir / "failures.csv", FAILURES_HEADER, failures)),
        "curves": curve_paths,
    }
    metadata = {
        "version": __version__,
        "profile": manifests[0].profile,
        "units": "bits" if bits else "nats",
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "elapsed_seconds": round(time.time() - started, 1),
        "workers": workers,
        "tasks": list(by_task),
        "cell_seconds": seconds,
    }
    write_json(out_dir / "report.json", {"metadata": metadata, "paths": paths,
                                         "failures": [dict(zip(FAILURES_HEADER, f)) for f in failures]})
    return BenchmarkReport(rows, per_seed_rows, failures, metadata, paths)
