"""Experiment configs, single runs, sweeps and their output files.

A config is a JSON object.  Parsing is strict: unknown keys and ill-typed
values raise :class:`~mmbopt.errors.ConfigurationError` naming the field path,
and every omitted field takes its documented default.  The step-size block
``run`` defaults per experiment kind (see :data:`DEFAULT_RUN`); a partial
``run`` block is completed from the same table.

Outputs of :func:`run_experiment` in ``out``: ``trace.csv`` and
``summary.json``.  :func:`run_sweep` writes one such pair per cell and seed
under ``out/cells/`` plus ``sweep_runs.csv`` (one row per cell and seed) and
``sweep_summary.csv`` (one row per cell, mean and std across seeds).
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import math
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import hypergrad
from .auc.data import TaskDataset, load_tasks, make_separable_tasks
from .auc.training import AppConfig, run_app
from .errors import ConfigurationError
from .optimizer import TRACE_COLUMNS, RunConfig, TraceRecord, iterations_to_threshold, run
from .problem import ProblemDims, SmoothnessProfile, synth_generate

log = logging.getLogger(__name__)

KINDS = ("synthetic-v1", "synthetic-v2", "auc-ct", "pauc")
SYNTHETIC = ("synthetic-v1", "synthetic-v2")


@dataclass(frozen=True)
class RunSpec:
    eta0: float
    eta1: float
    eta2: float
    eta3: float
    beta0: float
    beta1: float
    block_batch: int
    data_batch: int
    horizon: int
    gamma_radius: Optional[float] = None
    independent_product_batches: bool = True


_SYNTH_RUN = dict(eta0=0.01, eta1=0.3, eta2=0.2, eta3=0.2, beta0=0.1, beta1=0.1, block_batch=8, data_batch=4,
                  horizon=20000)
_APP_RUN = dict(eta0=0.1, eta1=0.1, eta2=0.5, eta3=0.0, beta0=0.1, beta1=0.1, block_batch=2, data_batch=16,
                horizon=2000)
DEFAULT_RUN = {
    "synthetic-v1": _SYNTH_RUN,
    "synthetic-v2": _SYNTH_RUN,
    "auc-ct": _APP_RUN,
    "pauc": {**_APP_RUN, "eta2": 0.05},
}


@dataclass(frozen=True)
class SeparableSpec:
    m: int = 2
    n: int = 500
    d: int = 10
    pos_frac: float = 0.1
    gap: float = 1.0


@dataclass(frozen=True)
class DataSpec:
    """Application data: delimited files when ``paths`` is nonempty, else generated separable tasks."""

    paths: list[str] = field(default_factory=list)
    task_column: bool = False
    delimiter: str = ","
    skip_header: int = 0
    separable: SeparableSpec = field(default_factory=SeparableSpec)


@dataclass(frozen=True)
class SweepSpec:
    block_batch: list[int] = field(default_factory=list)
    data_batch: list[int] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    workers: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment.

    ``seed`` drives problem generation, data generation, initialization and
    all sampling.  ``threshold`` is the ``|grad F|^2`` level for
    iterations-to-threshold; with ``stop_at_threshold`` a synthetic run ends
    as soon as its running minimum reaches it.  ``timing`` fills the trace's
    ``elapsed_ms`` column (which makes traces non-reproducible byte-wise).
    """

    kind: str
    seed: int = 0
    dims: ProblemDims = field(default_factory=lambda: ProblemDims(8, 10, 5))
    profile: SmoothnessProfile = field(default_factory=lambda: SmoothnessProfile(sigma=0.1))
    min_curvature: float = 0.5
    n_samples: int = 1000
    data: DataSpec = field(default_factory=DataSpec)
    run: Optional[RunSpec] = None
    app: AppConfig = field(default_factory=AppConfig)
    sweep: Optional[SweepSpec] = None
    record_every: int = 10
    threshold: float = 1e-2
    stop_at_threshold: bool = False
    timing: bool = False
    out: str = "runs"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"kind: must be one of {KINDS}, got {self.kind!r}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigurationError(f"seed: must lie in [0, 2^64), got {self.seed}")
        if self.run is None:
            object.__setattr__(self, "run", RunSpec(**DEFAULT_RUN[self.kind]))
        if self.record_every < 1:
            raise ConfigurationError(f"record_every: must be at least 1, got {self.record_every}")
        if not self.threshold > 0:
            raise ConfigurationError(f"threshold: must be positive, got {self.threshold}")
        self.run_config()  # validates the step sizes
        if self.kind in SYNTHETIC and self.run.block_batch > self.dims.m:
            raise ConfigurationError(f"run.block_batch: {self.run.block_batch} exceeds dims.m={self.dims.m}")

    def run_config(self, seed: Optional[int] = None) -> RunConfig:
        return RunConfig(**dataclasses.asdict(self.run), seed=self.seed if seed is None else seed,
                         record_every=self.record_every, timing=self.timing)


# -- strict (de)serialization -------------------------------------------------

def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigurationError(f"{path}: expected a list, got {type(value).__name__}")
        (inner,) = typing.get_args(tp)
        return [_coerce(inner, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigurationError(f"{path}: unsupported field type {_type_name(tp)}")


def _build(cls, raw, path: str = ""):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path or '<root>'}: expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.init]
    unknown = sorted(set(raw) - set(names))
    if unknown:
        where = f" in {path}" if path else ""
        raise ConfigurationError(f"unknown key(s){where}: {', '.join(unknown)}")
    kwargs = {}
    defaults = {f.name: f.default_factory for f in dataclasses.fields(cls)
                if f.default_factory is not dataclasses.MISSING}
    for name in names:
        if name not in raw:
            continue
        value = raw[name]
        # a partial nested object is completed from the field's default
        if isinstance(value, dict) and name in defaults and dataclasses.is_dataclass(defaults[name]()):
            value = {**_shallow(defaults[name]()), **value}
        kwargs[name] = _coerce(hints[name], value, f"{path}.{name}" if path else name)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"{path or '<root>'}: {exc}") from None
    except ConfigurationError as exc:
        msg = str(exc)
        raise ConfigurationError(msg if not path or msg.startswith(path) else f"{path}: {msg}") from None


def _shallow(obj) -> dict:
    return {f.name: dataclasses.asdict(getattr(obj, f.name)) if dataclasses.is_dataclass(getattr(obj, f.name))
            else getattr(obj, f.name) for f in dataclasses.fields(obj)}


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    if "kind" not in raw:
        raise ConfigurationError("kind: missing required field")
    kind = raw["kind"]
    if kind not in KINDS:
        raise ConfigurationError(f"kind: must be one of {KINDS}, got {kind!r}")
    raw = dict(raw)
    if raw.get("run") is not None:
        raw["run"] = {**DEFAULT_RUN[kind], **_checked_object(raw["run"], "run")}
    return _build(ExperimentConfig, raw)


def _checked_object(raw, path):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: expected an object, got {type(raw).__name__}")
    return raw


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def canonical_json(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), sort_keys=True, indent=2) + "\n"


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(raw)


def fingerprint(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical config without the output directory."""
    d = config_to_dict(cfg)
    d.pop("out")
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# -- single runs ---------------------------------------------------------------

def _fmt(value) -> str:
    return "" if value is None else "%.17g" % value


def write_trace(path: Path, trace: list[TraceRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for rec in trace:
            w.writerow([str(rec.iter)] + [_fmt(getattr(rec, c)) for c in TRACE_COLUMNS[1:]])


def read_trace(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (None if v == "" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def load_app_data(cfg: ExperimentConfig) -> TaskDataset:
    spec = cfg.data
    if spec.paths:
        return load_tasks(spec.paths, spec.delimiter, spec.task_column, spec.skip_header)
    s = spec.separable
    return make_separable_tasks(cfg.seed, s.m, s.n, s.d, s.pos_frac, s.gap)


def _finite_or_none(v):
    return None if v is None or not math.isfinite(v) else float(v)


def _synthetic(cfg: ExperimentConfig):
    problem = synth_generate(cfg.seed, cfg.dims, cfg.profile, cfg.min_curvature, cfg.n_samples)
    variant = cfg.kind.split("-")[1]
    best = {"g": math.inf, "x": None, "iter": None}
    prev = {"x": None}

    def track(t, state, rec):
        # a record at iteration t describes the iterate before step t
        if rec is not None and rec.grad_norm_sq is not None and rec.grad_norm_sq < best["g"]:
            best.update(g=rec.grad_norm_sq, x=prev["x"], iter=rec.iter)
        prev["x"] = state.x.copy()
        return cfg.stop_at_threshold and best["g"] <= cfg.threshold

    from .optimizer import init_state
    state0 = init_state(problem, variant)
    prev["x"] = state0.x.copy()
    result = run(problem, cfg.run_config(), variant, [track], state=state0)
    grads = [r.grad_norm_sq for r in result.trace if r.grad_norm_sq is not None]
    tau_g = None
    if result.x_tau is not None and np.all(np.isfinite(result.x_tau)):
        g = hypergrad.exact_grad_F(problem, result.x_tau)
        tau_g = float(g @ g)
    summary = {
        "final_stationarity": _finite_or_none(best["g"]),
        "running_min_iter": best["iter"],
        "running_min_x": None if best["x"] is None else best["x"].tolist(),
        "last_grad_norm_sq": _finite_or_none(grads[-1]) if grads else None,
        "tau": result.tau,
        "tau_grad_norm_sq": tau_g,
        "iterations_to_threshold": iterations_to_threshold(result.trace, cfg.threshold),
        "metric": None,
    }
    return result.trace, result.status, result.state.t, result.wall_ms, summary


def _application(cfg: ExperimentConfig):
    data = load_app_data(cfg)
    result = run_app(cfg.kind, data, cfg.run_config(), cfg.app)
    name = "auc" if cfg.kind == "auc-ct" else f"pauc@{cfg.app.pauc.rho:g}"
    summary = {
        "final_stationarity": None,
        "running_min_iter": None,
        "running_min_x": None,
        "last_grad_norm_sq": None,
        "tau": None,
        "tau_grad_norm_sq": None,
        "iterations_to_threshold": None,
        "metric": {"name": name, "value": result.final_metric,
                   "best": max((v for _, v in result.metrics), default=None)},
    }
    return result.trace, result.status, result.state.t, result.wall_ms, summary


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None) -> dict:
    """Run one experiment and write ``trace.csv`` and ``summary.json`` into ``out`` (default ``cfg.out``).

    Returns the summary.  ``summary["status"]`` is ``"ok"``, ``"stopped"``
    (threshold reached with ``stop_at_threshold``) or ``"diverged"``.
    ``iterations_to_threshold`` is ``null`` when never reached.
    """
    out = Path(cfg.out if out is None else out)
    out.mkdir(parents=True, exist_ok=True)
    runner = _synthetic if cfg.kind in SYNTHETIC else _application
    trace, status, iters, wall_ms, body = runner(cfg)
    write_trace(out / "trace.csv", trace)
    summary = {"fingerprint": fingerprint(cfg), "kind": cfg.kind, "seed": cfg.seed, "status": status,
               "iterations_run": iters, "threshold": cfg.threshold, **body, "wall_ms": wall_ms,
               "config": config_to_dict(cfg)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# -- sweeps --------------------------------------------------------------------

def sweep_cells(cfg: ExperimentConfig) -> list[dict]:
    """Cartesian product of the nonempty sweep axes (an empty axis keeps the base value)."""
    sw = cfg.sweep
    if sw is None or not (sw.block_batch or sw.data_batch):
        raise ConfigurationError("sweep: at least one of block_batch, data_batch must be a nonempty list")
    if not sw.seeds:
        raise ConfigurationError("sweep.seeds: must be nonempty")
    bb = sw.block_batch or [cfg.run.block_batch]
    db = sw.data_batch or [cfg.run.data_batch]
    return [{"block_batch": b, "data_batch": d} for b, d in itertools.product(bb, db)]


def _cell_dir(root: Path, cell: dict, seed: int) -> Path:
    return root / "cells" / f"bb{cell['block_batch']}_db{cell['data_batch']}" / f"seed{seed}"


def _run_cell(args) -> dict:
    cfg, cell, seed, out = args
    try:
        cell_cfg = dataclasses.replace(cfg, seed=seed, sweep=None,
                                       run=dataclasses.replace(cfg.run, **cell), out=str(out))
        summary = run_experiment(cell_cfg)
        err = None
    except Exception as exc:  # a failed cell is reported, not fatal
        log.warning("sweep cell %s seed %d failed: %s", cell, seed, exc)
        summary, err = {}, f"{type(exc).__name__}: {exc}"
    status = "failed" if err else summary["status"]
    if status == "diverged":
        err = "diverged"
    return {**cell, "seed": seed, "status": "failed" if err else status,
            "iterations_to_threshold": summary.get("iterations_to_threshold"),
            "final_stationarity": summary.get("final_stationarity"),
            "metric": (summary.get("metric") or {}).get("value"), "error": err}


RUN_COLUMNS = ("block_batch", "data_batch", "seed", "status", "iterations_to_threshold", "final_stationarity",
               "metric", "error")
SUMMARY_COLUMNS = ("block_batch", "data_batch", "n_seeds", "n_failed", "n_missed", "mean_iterations",
                   "std_iterations", "mean_final_stationarity", "mean_metric", "status")


def _cell_summary(cell: dict, rows: list[dict], horizon: int) -> dict:
    ok = [r for r in rows if r["status"] != "failed"]
    # runs that never reach the threshold count as the full horizon
    its = [horizon if r["iterations_to_threshold"] is None else r["iterations_to_threshold"] for r in ok]
    stat = [r["final_stationarity"] for r in ok if r["final_stationarity"] is not None]
    met = [r["metric"] for r in ok if r["metric"] is not None]
    return {**cell, "n_seeds": len(rows), "n_failed": len(rows) - len(ok),
            "n_missed": sum(r["iterations_to_threshold"] is None for r in ok),
            "mean_iterations": float(np.mean(its)) if its else None,
            "std_iterations": float(np.std(its, ddof=1)) if len(its) > 1 else (0.0 if its else None),
            "mean_final_stationarity": float(np.mean(stat)) if stat else None,
            "mean_metric": float(np.mean(met)) if met else None,
            "status": "failed" if len(ok) < len(rows) else "ok"}


def _write_rows(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r[c] is None else (_fmt(r[c]) if isinstance(r[c], float) else r[c]) for c in columns])


def run_sweep(cfg: ExperimentConfig, out: str | Path | None = None) -> list[dict]:
    """Run every sweep cell for every seed; returns the per-cell summary rows.

    With ``sweep.workers > 1`` cells run in separate processes; each writes
    only its own directory and the tables are assembled afterwards in a fixed
    order.
    """
    root = Path(cfg.out if out is None else out)
    cells = sweep_cells(cfg)
    jobs = [(cfg, cell, seed, _cell_dir(root, cell, seed)) for cell in cells for seed in cfg.sweep.seeds]
    if cfg.sweep.workers > 1:
        with ProcessPoolExecutor(cfg.sweep.workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    root.mkdir(parents=True, exist_ok=True)
    _write_rows(root / "sweep_runs.csv", RUN_COLUMNS, rows)
    n = len(cfg.sweep.seeds)
    table = [_cell_summary(cell, rows[i * n:(i + 1) * n], cfg.run.horizon) for i, cell in enumerate(cells)]
    _write_rows(root / "sweep_summary.csv", SUMMARY_COLUMNS, table)
    return table


def default_config(kind: str, **overrides: Any) -> ExperimentConfig:
    return config_from_dict({"kind": kind, **overrides})
