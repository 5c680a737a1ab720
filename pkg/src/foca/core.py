"""Shared numeric state, time grid and cache-schedule types.

Feature vectors are plain float64 numpy arrays. A "feature" may be a flat
vector of length d or a batch of them (shape ``(B, d)``); every predictor
works elementwise, so the two are interchangeable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class MissingHistoryError(RuntimeError):
    """Raised when a predictor needs cached values that are not there yet."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation would return NaN or Inf."""


def as_feature(values, *, copy: bool = True) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=copy)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return ensure_finite(arr)


def ensure_finite(arr: np.ndarray, what: str = "feature") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains non-finite entries")
    return arr


# ---------------------------------------------------------------------------
# Time grid and step-index convention
# ---------------------------------------------------------------------------

def timestep_of(step_index: int, total_steps: int) -> int:
    """Map a forward sampling step (0 = noisiest) to a reverse timestep.

    Step 0 corresponds to timestep ``total_steps`` and the last step to
    timestep 1. This is the only place where the two index conventions meet.
    """
    if not 0 <= step_index < total_steps:
        raise IndexError(f"step_index {step_index} outside [0, {total_steps})")
    return total_steps - step_index


def step_of(timestep: int, total_steps: int) -> int:
    if not 1 <= timestep <= total_steps:
        raise IndexError(f"timestep {timestep} outside [1, {total_steps}]")
    return total_steps - timestep


@dataclass(frozen=True)
class TimeGrid:
    """Uniform reverse-time grid ``T, T-1, ..., 1`` with spacing ``h``."""

    total_steps: int
    h: float = 1.0

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if not self.h > 0:
            raise ValueError("h must be positive")

    @property
    def steps(self) -> list[int]:
        return [timestep_of(s, self.total_steps) for s in range(self.total_steps)]

    def time(self, step_index: int) -> float:
        """Elapsed time in timestep units at forward step ``step_index``."""
        return step_index * self.h


# ---------------------------------------------------------------------------
# Cache schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CacheSchedule:
    interval: int
    total_steps: int
    warmup_steps: int = 2

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("interval N must be >= 1")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")

    def is_full_step(self, step_index: int) -> bool:
        return schedule_is_full_step(self, step_index)

    @property
    def evaluation_count(self) -> int:
        return evaluation_count(self)

    @property
    def acceleration_ratio(self) -> float:
        return self.total_steps / evaluation_count(self)


def schedule_is_full_step(schedule: CacheSchedule, step_index: int) -> bool:
    if not 0 <= step_index < schedule.total_steps:
        raise IndexError(
            f"step_index {step_index} outside [0, {schedule.total_steps})")
    if step_index < schedule.warmup_steps:
        return True
    return (step_index - schedule.warmup_steps) % schedule.interval == 0


def evaluation_count(schedule: CacheSchedule) -> int:
    rest = schedule.total_steps - schedule.warmup_steps
    if rest <= 0:
        return schedule.total_steps
    return schedule.warmup_steps + math.ceil(rest / schedule.interval)


# ---------------------------------------------------------------------------
# Cache state
# ---------------------------------------------------------------------------

@dataclass
class CacheState:
    """Recent feature values consumed by the predictors.

    ``recent`` holds the last two (step, value) pairs on the sampling grid,
    full or predicted. ``full_history`` holds full computations only and is
    kept uniformly spaced so finite differences stay well defined.
    """

    taylor_capacity: int = 3
    recent: list[tuple[int, np.ndarray]] = field(default_factory=list)
    last_full: tuple[int, np.ndarray] | None = None
    last_full_slope: np.ndarray | None = None
    full_history: list[tuple[int, np.ndarray]] = field(default_factory=list)

    @property
    def last_derivative(self) -> np.ndarray | None:
        if len(self.recent) < 2:
            return None
        (s0, f0), (s1, f1) = self.recent
        return (f1 - f0) / (s1 - s0)

    def push_recent(self, step_index: int, value: np.ndarray) -> None:
        if self.recent and step_index <= self.recent[-1][0]:
            raise ValueError("recent entries must have increasing step indices")
        self.recent.append((step_index, value))
        if len(self.recent) > 2:
            del self.recent[0]

    def replace_newest(self, value: np.ndarray) -> None:
        step = self.recent[-1][0]
        self.recent[-1] = (step, value)

    def record_full(self, step_index: int, value: np.ndarray, h: float = 1.0) -> None:
        """Store a freshly computed feature.

        The slope kept for the corrector is the backward difference between
        this and the previous full computation, over their actual spacing.
        """
        value = np.array(value, dtype=np.float64)
        prev = self.last_full
        if prev is not None:
            if step_index <= prev[0]:
                raise ValueError("full computations must have increasing step indices")
            self.last_full_slope = (value - prev[1]) / ((step_index - prev[0]) * h)
        self.last_full = (step_index, value)
        self.push_recent(step_index, value)

        hist = self.full_history
        if len(hist) >= 2 and step_index - hist[-1][0] != hist[-1][0] - hist[-2][0]:
            del hist[:-1]
        hist.append((step_index, value))
        if len(hist) > self.taylor_capacity:
            del hist[0]

    @property
    def full_spacing(self) -> int | None:
        if len(self.full_history) < 2:
            return None
        return self.full_history[-1][0] - self.full_history[-2][0]
