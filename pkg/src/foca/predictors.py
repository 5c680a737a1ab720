"""Feature predictors for skipped steps, and the cached sampler loop.

All predictors read a :class:`~foca.core.CacheState`. Conventions:

* step indices count forward from the start of sampling;
* ``h`` is the grid spacing in timestep units;
* ``k`` is the offset of the predicted step from the last full computation.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import CacheSchedule, CacheState, MissingHistoryError, NonFiniteError
from .dynamics import TrajectorySource, uncached_run

KINDS = ("reuse", "taylor", "bdf2", "foca")


@dataclass(frozen=True)
class PredictorKind:
    name: str
    order: int = 0

    def __post_init__(self):
        if self.name not in KINDS:
            raise ValueError(f"unknown predictor {self.name!r}; expected one of {KINDS}")
        if self.name == "taylor" and self.order < 1:
            raise ValueError("Taylor order must be >= 1")

    @classmethod
    def parse(cls, text: str, default_order: int = 2) -> "PredictorKind":
        """Accepts ``reuse``, ``bdf2``, ``foca``, ``taylor``, ``taylor3``, ``taylor(m=1)``."""
        key = text.strip().lower().replace("-", "").replace("_", "")
        key = {"bdf2only": "bdf2"}.get(key, key)
        if key in KINDS:
            return cls(key, default_order if key == "taylor" else 0)
        m = re.fullmatch(r"taylor\s*(?:\(\s*(?:m\s*=\s*)?(\d+)\s*\)|(\d+))", key)
        if not m:
            raise ValueError(f"cannot parse predictor {text!r}")
        return cls("taylor", int(m.group(1) or m.group(2)))

    @property
    def label(self) -> str:
        return f"taylor{self.order}" if self.name == "taylor" else self.name

    @property
    def history_capacity(self) -> int:
        return self.order + 1 if self.name == "taylor" else 2


# ---------------------------------------------------------------------------
# Reuse
# ---------------------------------------------------------------------------

def predict_reuse(cache: CacheState) -> np.ndarray:
    if cache.last_full is None:
        raise MissingHistoryError("reuse needs at least one full computation")
    return cache.last_full[1].copy()


# ---------------------------------------------------------------------------
# Taylor extrapolation
# ---------------------------------------------------------------------------

def finite_differences(history, m: int) -> list[np.ndarray]:
    """Backward differences of orders ``1..m`` anchored at the newest entry.

    ``history`` is ordered oldest first. If it is too short, the result is
    truncated to the highest order it supports.
    """
    order = min(m, len(history) - 1)
    diffs = []
    level = [np.asarray(v, dtype=np.float64) for v in history[-(order + 1):]]
    for _ in range(order):
        level = [b - a for a, b in zip(level[:-1], level[1:])]
        diffs.append(level[-1])
    return diffs


def taylor_expand(base: np.ndarray, diffs, k: int, N: int) -> np.ndarray:
    """``base + sum_i diffs[i-1] / (i! N^i) * (-k)^i``.

    ``diffs`` are expressed against the reverse timestep index, which
    decreases while sampling proceeds; hence the ``(-k)`` factor.
    """
    out = np.array(base, dtype=np.float64)
    for i, d in enumerate(diffs, start=1):
        out = out + d * ((-k) ** i / (math.factorial(i) * N ** i))
    return out


def to_timestep_direction(diffs) -> list[np.ndarray]:
    """Re-express sampling-order differences against the reverse timestep index."""
    return [d * (-1) ** i for i, d in enumerate(diffs, start=1)]


def predict_taylor(cache: CacheState, k: int, m: int, N: int | None = None) -> np.ndarray:
    """Taylor forecast from the uniformly spaced full-compute history.

    ``N`` defaults to the actual spacing of that history, which is the
    schedule interval once warmup is over.
    """
    hist = cache.full_history
    if not hist:
        raise MissingHistoryError("Taylor forecast needs a full computation")
    spacing = cache.full_spacing or 1
    N = spacing if N is None else N
    diffs = finite_differences([v for _, v in hist], m)
    return taylor_expand(hist[-1][1], to_timestep_direction(diffs), k, N)


# ---------------------------------------------------------------------------
# BDF2 forecast and Heun calibration
# ---------------------------------------------------------------------------

def estimate_derivative(cache: CacheState, h: float = 1.0) -> np.ndarray:
    if len(cache.recent) < 2:
        raise MissingHistoryError("derivative estimate needs two cached entries")
    (s0, f0), (s1, f1) = cache.recent
    return (f1 - f0) / ((s1 - s0) * h)


def predict_bdf2(cache: CacheState, h: float = 1.0) -> np.ndarray:
    """Explicit BDF2 forecast one step past the newest cached entry.

    The forecast is appended to ``cache.recent``.
    """
    deriv = estimate_derivative(cache, h)
    (_, prev), (step, cur) = cache.recent
    pred = (4.0 / 3.0) * cur - (1.0 / 3.0) * prev + (2.0 * h / 3.0) * deriv
    cache.push_recent(step + 1, pred)
    return pred


def correct_heun(cache: CacheState, predicted: np.ndarray, h: float = 1.0) -> np.ndarray:
    """Trapezoidal blend of the slope at the last full step and the forecast slope.

    Expects ``cache.recent`` to end with ``predicted``, as left by
    :func:`predict_bdf2`; the corrected value replaces it.
    """
    if cache.last_full_slope is None:
        raise MissingHistoryError("Heun correction needs the slope at a full step")
    current = cache.recent[-2][1]
    slope_end = (predicted - current) / h
    corrected = current + (h / 2.0) * (cache.last_full_slope + slope_end)
    cache.replace_newest(corrected)
    return corrected


def foca_step(cache: CacheState, h: float = 1.0) -> np.ndarray:
    return correct_heun(cache, predict_bdf2(cache, h), h)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def predict(kind: PredictorKind, cache: CacheState, step_index: int, h: float = 1.0):
    """Predicted feature at ``step_index`` and a fallback note (``""`` if none).

    Leaves ``cache.recent`` ending with the returned value.
    """
    last_step = cache.last_full[0] if cache.last_full is not None else None
    if last_step is None:
        raise MissingHistoryError("no full computation before the first skipped step")
    if cache.recent[-1][0] != step_index - 1:
        raise ValueError("predictions must be requested for consecutive steps")
    note = ""
    if kind.name == "reuse":
        pred = predict_reuse(cache)
    elif kind.name == "taylor":
        if len(cache.full_history) < kind.order + 1:
            note = f"taylor order {len(cache.full_history) - 1}"
        pred = predict_taylor(cache, step_index - last_step, kind.order)
    else:
        if len(cache.recent) < 2:
            # one point only: zero-slope first-order step
            cache.push_recent(step_index, cache.recent[-1][1].copy())
            return cache.recent[-1][1], "first-order start"
        pred = predict_bdf2(cache, h)
        if kind.name == "foca":
            if cache.last_full_slope is None:
                note = "no full-step slope; uncorrected"
            else:
                pred = correct_heun(cache, pred, h)
        return pred, note
    cache.push_recent(step_index, pred)
    return pred, note


# ---------------------------------------------------------------------------
# Cached sampler
# ---------------------------------------------------------------------------

@dataclass
class CachedRun:
    """Raw output of one cached sampler run."""

    features: np.ndarray
    is_full: np.ndarray
    output: np.ndarray | None
    truth: np.ndarray
    truth_output: np.ndarray | None
    notes: dict
    aborted: str = ""

    @property
    def evaluation_count(self) -> int:
        return int(self.is_full.sum())


def cached_features(source: TrajectorySource, is_full: Callable[[int], bool],
                    kind: PredictorKind, *, truth=None) -> CachedRun:
    """Drive ``source`` with cached features; ``is_full(s)`` selects full steps."""
    if truth is None:
        truth_feats, truth_out, _ = uncached_run(source)
    else:
        truth_feats, truth_out = truth
    h = source.grid.h
    total = source.grid.total_steps
    cache = CacheState(taylor_capacity=kind.history_capacity)
    state = source.start()
    feats, full_flags, notes = [], [], {}
    aborted = ""
    for s in range(total):
        full = bool(is_full(s))
        if full:
            f = np.asarray(source.compute(state, s), dtype=np.float64)
            cache.record_full(s, f, h)
        else:
            f, note = predict(kind, cache, s, h)
            if note:
                notes[s] = note
        if not np.all(np.isfinite(f)):
            aborted = f"non-finite feature at step {s}"
            break
        feats.append(f)
        full_flags.append(full)
        state = source.complete(state, f, s)
    out = None if aborted else source.output(state)
    if out is not None and not np.all(np.isfinite(out)):
        aborted = "non-finite output"
    return CachedRun(np.stack(feats) if feats else np.empty((0,)),
                     np.array(full_flags, dtype=bool), out, truth_feats, truth_out,
                     notes, aborted)


def run_cached_sampler(source: TrajectorySource, schedule: CacheSchedule,
                       kind: PredictorKind, *, truth=None, with_diagnostics: bool = True):
    """Cached run under ``schedule``, summarized as a :class:`RunReport`."""
    from .diagnostics import build_report

    if schedule.total_steps != source.grid.total_steps:
        raise ValueError("schedule and source disagree on the number of steps")
    run = cached_features(source, schedule.is_full_step, kind, truth=truth)
    return build_report(run, schedule, kind, h=source.grid.h, with_diagnostics=with_diagnostics)


__all__ = [
    "PredictorKind", "predict_reuse", "finite_differences", "taylor_expand",
    "to_timestep_direction", "predict_taylor", "estimate_derivative", "predict_bdf2",
    "correct_heun", "foca_step", "predict", "cached_features", "run_cached_sampler",
    "CachedRun", "NonFiniteError",
]
