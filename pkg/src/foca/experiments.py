"""Experiment runners behind the CLI: sweep, bound check, trajectory dump, training.

Each runner takes a validated config (see :mod:`foca.config`) and writes its
files into ``cfg["out"]``. Sweep cells are independent; each one stores its
formatted rows in a temporary part file, and the parts are merged in
(kind, N, seed) order, so worker count never changes the output bytes.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .config import ConfigError
from .core import CacheSchedule, MissingHistoryError, TimeGrid
from .denoiser import MixtureData, ToyDenoiser, ToyDenoiserSource, TrainConfig, train_denoiser
from .diagnostics import mmd_sample_quality, verify_proposition1
from .dynamics import DrivenLinearSource, LinearSystem, ReplaySource, StiffTestProblem, uncached_run
from .outputs import (FAILURE_COLUMNS, STEPS_COLUMNS, SUMMARY_COLUMNS, TRAIN_LOG_COLUMNS, fmt,
                      write_csv, write_json)
from .predictors import PredictorKind, cached_features, run_cached_sampler
from .rng import make_rng

log = logging.getLogger(__name__)

MMD_DATA_STREAM = 11


class TrainingError(RuntimeError):
    """Training ended above the loss threshold."""


# ---------------------------------------------------------------------------
# Sources
# ---------------------------------------------------------------------------

@lru_cache(maxsize=4)
def _load_model(path: str | None) -> ToyDenoiser:
    return ToyDenoiser.load(path)


def linear_system(cfg: dict) -> LinearSystem:
    s = cfg["source"]
    return LinearSystem.contractive_rotation(s["rho"], s["theta"], s["h"], s["initial_state"])


def build_source(cfg: dict, seed: int, batch: int | None = None):
    s = cfg["source"]
    total = cfg["schedule"]["total_steps"]
    if s["kind"] == "toy_denoiser":
        try:
            model = _load_model(s["weights"])
        except (OSError, ValueError) as exc:
            raise ConfigError(f"source.weights: {exc}") from exc
        if model.T != total:
            raise ConfigError(f"schedule.total_steps: weights were trained for T={model.T}, "
                              f"got {total}")
        return ToyDenoiserSource.seeded(model, seed, batch or s["batch"])
    if s["kind"] == "driven_linear":
        return DrivenLinearSource(linear_system(cfg), total)
    if s["problem"] == "two_scale":
        params = {"lambda_fast": -s["stiffness"], "lambda_slow": -1.0}
    else:
        params = {"mu": s["stiffness"]}
    try:
        problem = StiffTestProblem(s["problem"], params)
    except ValueError as exc:
        raise ConfigError(f"source.stiffness: {exc}") from exc
    return ReplaySource.from_stiff(problem, TimeGrid(total, s["h"]))


def _schedule(cfg: dict, interval: int) -> CacheSchedule:
    sch = cfg["schedule"]
    return CacheSchedule(interval, sch["total_steps"], sch["warmup"])


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    cells: int
    failures: list[str]
    out_dir: Path


def run_cell(cfg: dict, label: str, interval: int, seed: int) -> dict:
    """One (kind, N, seed) cell as formatted CSV rows."""
    exp = cfg["experiment"]
    kind = PredictorKind.parse(label)
    m = kind.order if kind.name == "taylor" else None
    failure = ""
    steps, summary = [], [exp, label, interval, m, seed] + [None] * 6
    try:
        source = build_source(cfg, seed)
        schedule = _schedule(cfg, interval)
        report = run_cached_sampler(source, schedule, kind)
        for r in report.records:
            steps.append([exp, label, interval, seed, r.step_index, r.is_full, r.rel_error,
                          r.lte, r.stiffness_index])
        mmd = prop1 = None
        if report.aborted:
            failure = report.aborted
        elif cfg["source"]["kind"] == "toy_denoiser" and cfg["diagnostics"]["mmd"]:
            data = MixtureData().sample(len(report.output), make_rng(seed, MMD_DATA_STREAM))
            mmd = mmd_sample_quality(report.output, data)
        if cfg["source"]["kind"] == "driven_linear" and not failure:
            p = cfg["prop1"]
            prop1 = verify_proposition1(source.system, p["max_k"], kind=kind,
                                        warmup_steps=cfg["schedule"]["warmup"],
                                        slack=p["slack"]).verdict
        summary = [exp, label, interval, m, seed, report.evaluation_count,
                   report.acceleration_ratio, report.terminal_sample_deviation, mmd, prop1,
                   report.max_rel_error]
    except ConfigError:
        raise
    except (ArithmeticError, ValueError, MissingHistoryError) as exc:
        failure = f"{type(exc).__name__}: {exc}"
    return {
        "steps": [[fmt(v) for v in row] for row in steps],
        "summary": [fmt(v) for v in summary],
        "failure": [exp, label, str(interval), str(seed), failure] if failure else None,
    }


def _cell_to_file(args) -> str:
    cfg, label, interval, seed, path = args
    Path(path).write_text(json.dumps(run_cell(cfg, label, interval, seed)))
    return path


def sweep_cells(cfg: dict) -> list[tuple[str, int, int]]:
    return [(k, n, s) for k in cfg["predictors"]
            for n in cfg["schedule"]["intervals"] for s in cfg["seeds"]]


def cmd_sweep(cfg: dict) -> SweepResult:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    cells = sweep_cells(cfg)
    build_source(cfg, cfg["seeds"][0])  # surface config errors before any work
    with tempfile.TemporaryDirectory(dir=out, prefix=".cells-") as tmp:
        jobs = [(cfg, k, n, s, os.path.join(tmp, f"cell-{i:05d}.json"))
                for i, (k, n, s) in enumerate(cells)]
        if cfg["workers"] == 1:
            paths = [_cell_to_file(job) for job in jobs]
        else:
            with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
                paths = list(pool.map(_cell_to_file, jobs))
        steps, summary, failures = [], [], []
        for path in paths:
            part = json.loads(Path(path).read_text())
            steps.extend(part["steps"])
            summary.append(part["summary"])
            if part["failure"]:
                failures.append(part["failure"])
    write_csv(out / "steps.csv", STEPS_COLUMNS, steps, cfg)
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary, cfg)
    write_csv(out / "failures.csv", FAILURE_COLUMNS, failures, cfg)
    for f in failures:
        log.warning("cell %s N=%s seed=%s failed: %s", f[1], f[2], f[3], f[4])
    return SweepResult(len(cells), [f[4] for f in failures], out)


# ---------------------------------------------------------------------------
# Bound check, trajectory dump, training
# ---------------------------------------------------------------------------

def cmd_prop1(cfg: dict) -> dict:
    if cfg["source"]["kind"] != "driven_linear":
        raise ConfigError("source.kind: the bound check needs a driven_linear source")
    system = linear_system(cfg)
    p = cfg["prop1"]
    try:
        report = verify_proposition1(system, p["max_k"], kind=PredictorKind.parse(p["kind"]),
                                     warmup_steps=cfg["schedule"]["warmup"], slack=p["slack"])
    except ValueError as exc:
        raise ConfigError(f"source.rho: {exc}") from exc
    payload = {"system": {"A": system.A.tolist(), "h": system.h,
                          "initial_state": system.initial_state.tolist()},
               "report": report.as_dict()}
    write_json(Path(cfg["out"]) / "prop1.json", payload, cfg)
    return payload


def cmd_dump(cfg: dict) -> Path:
    d = cfg["dump"]
    seed = cfg["seeds"][0]
    source = build_source(cfg, seed, batch=d["batch"])
    kind = PredictorKind.parse(d["kind"])
    schedule = _schedule(cfg, d["interval"])
    truth = uncached_run(source)[:2]
    run = cached_features(source, schedule.is_full_step, kind, truth=truth)
    if run.aborted:
        raise FloatingPointError(run.aborted)
    cached = run.features.reshape(len(run.features), -1)
    plain = truth[0].reshape(len(truth[0]), -1)
    dim = cached.shape[1]
    columns = (["step_index"] + [f"f{i}_cached" for i in range(dim)]
               + [f"f{i}_uncached" for i in range(dim)])
    rows = [[s] + [float(v) for v in cached[s]] + [float(v) for v in plain[s]]
            for s in range(len(cached))]
    return write_csv(Path(cfg["out"]) / "trajectory.csv", columns, rows, cfg)


def cmd_train(cfg: dict):
    tc = TrainConfig(seed=cfg["seeds"][0], **cfg["train"])
    result = train_denoiser(tc)
    out = Path(cfg["out"])
    write_csv(out / "train_log.csv", TRAIN_LOG_COLUMNS, result.trace, cfg)
    converged = bool(np.isfinite(result.excess_mse) and result.excess_mse < tc.excess_mse_threshold)
    metrics = {"holdout_mse": result.holdout_mse, "bayes_mse": result.bayes_mse,
               "excess_mse": result.excess_mse}
    metrics = {k: (v if np.isfinite(v) else None) for k, v in metrics.items()}
    write_json(out / "train.json",
               {**metrics, "threshold": tc.excess_mse_threshold, "converged": converged}, cfg)
    if not converged:
        raise TrainingError(f"excess held-out MSE {result.excess_mse:.4g} is not below "
                            f"{tc.excess_mse_threshold} after {tc.steps} steps")
    result.model.save(out / "toy_denoiser.txt")
    return result
