"""Ground-truth trajectory generators.

Two families of sources live here:

* replay sources, whose feature at step ``s`` is a known function of time
  (exact ODE solutions, reference integrations, or any callable), and
* driven sources, where the cached feature is the right-hand side that
  advances a state, so prediction errors feed back into later features.

The toy diffusion sampler is a driven source too; it lives in
:mod:`foca.denoiser`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, runtime_checkable

import numpy as np
import scipy.linalg

from .core import NonFiniteError, TimeGrid, ensure_finite, step_of


# ---------------------------------------------------------------------------
# Linear systems
# ---------------------------------------------------------------------------

@dataclass
class LinearSystem:
    """``dF/dt = A F`` with ``F(0) = initial_state``."""

    A: np.ndarray
    initial_state: np.ndarray
    h: float = 1.0

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.initial_state = np.atleast_1d(np.asarray(self.initial_state, dtype=np.float64))
        d = self.initial_state.shape[0]
        if self.A.shape != (d, d):
            raise ValueError(f"A has shape {self.A.shape}, expected {(d, d)}")

    @property
    def dim(self) -> int:
        return self.initial_state.shape[0]

    @property
    def is_diagonal(self) -> bool:
        return np.count_nonzero(self.A - np.diag(np.diagonal(self.A))) == 0

    @property
    def step_map(self) -> np.ndarray:
        """One explicit step of size ``h``: ``I + hA``."""
        return np.eye(self.dim) + self.h * self.A

    @property
    def contraction_rho(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.step_map))))

    def rhs(self, t: float, y: np.ndarray) -> np.ndarray:
        return y @ self.A.T

    @classmethod
    def contractive_rotation(cls, rho: float, theta: float = 0.3, h: float = 1.0,
                             initial_state=(1.0, 0.5)) -> "LinearSystem":
        """2-D system whose step map is ``rho`` times a rotation by ``theta``.

        The step map is normal, so its spectral norm equals ``rho``.
        """
        c, s = np.cos(theta), np.sin(theta)
        step = rho * np.array([[c, -s], [s, c]])
        return cls((step - np.eye(2)) / h, np.asarray(initial_state), h)


def exact_solution(system: LinearSystem, t: float) -> np.ndarray:
    if t < 0:
        raise ValueError("t must be non-negative")
    with np.errstate(over="ignore", invalid="ignore"):
        if system.is_diagonal:
            out = system.initial_state * np.exp(np.diagonal(system.A) * t)
        else:
            out = scipy.linalg.expm(system.A * t) @ system.initial_state
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"exact solution overflows at t={t}")
    return out


def rk4_integrate(rhs: Callable[[float, np.ndarray], np.ndarray], y0, t_eval,
                  substeps: int = 1000) -> np.ndarray:
    """Classical fourth-order Runge-Kutta, sampled at ``t_eval``.

    Each interval between consecutive sample times is split into
    ``substeps`` equal steps.
    """
    t_eval = np.asarray(t_eval, dtype=np.float64)
    y = np.array(y0, dtype=np.float64)
    out = np.empty((len(t_eval),) + y.shape)
    t = float(t_eval[0])
    out[0] = y
    for i in range(1, len(t_eval)):
        dt = (t_eval[i] - t) / substeps
        for _ in range(substeps):
            k1 = rhs(t, y)
            k2 = rhs(t + dt / 2, y + dt / 2 * k1)
            k3 = rhs(t + dt / 2, y + dt / 2 * k2)
            k4 = rhs(t + dt, y + dt * k3)
            y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += dt
        t = float(t_eval[i])
        out[i] = y
    return ensure_finite(out, "reference integration")


# ---------------------------------------------------------------------------
# Stiff test problems
# ---------------------------------------------------------------------------

@dataclass
class StiffTestProblem:
    """Either ``two_scale`` (diagonal, eigenvalues fast/slow) or ``van_der_pol``."""

    name: str
    params: dict = field(default_factory=dict)
    initial_state: np.ndarray | None = None

    def __post_init__(self):
        if self.name == "two_scale":
            self.params.setdefault("lambda_fast", -100.0)
            self.params.setdefault("lambda_slow", -1.0)
            if abs(self.params["lambda_fast"] / self.params["lambda_slow"]) < 100:
                raise ValueError("two_scale needs |lambda_fast/lambda_slow| >= 100")
            default = (1.0, 1.0)
        elif self.name == "van_der_pol":
            self.params.setdefault("mu", 10.0)
            default = (2.0, 0.0)
        else:
            raise ValueError(f"unknown stiff problem {self.name!r}")
        if self.initial_state is None:
            self.initial_state = np.array(default)
        self.initial_state = np.asarray(self.initial_state, dtype=np.float64)

    @property
    def stiffness_ratio(self) -> float:
        if self.name == "two_scale":
            return abs(self.params["lambda_fast"] / self.params["lambda_slow"])
        return float(self.params["mu"])

    def as_linear_system(self, h: float = 1.0) -> LinearSystem:
        if self.name != "two_scale":
            raise TypeError("only the two_scale problem is linear")
        A = np.diag([self.params["lambda_fast"], self.params["lambda_slow"]])
        return LinearSystem(A, self.initial_state, h)

    def rhs(self, t: float, y: np.ndarray) -> np.ndarray:
        if self.name == "two_scale":
            return y * np.array([self.params["lambda_fast"], self.params["lambda_slow"]])
        mu = self.params["mu"]
        return np.array([y[1], mu * (1 - y[0] ** 2) * y[1] - y[0]])

    def solution(self, times) -> np.ndarray:
        times = np.asarray(times, dtype=np.float64)
        if self.name == "two_scale":
            system = self.as_linear_system()
            return np.stack([exact_solution(system, t) for t in times])
        return rk4_integrate(self.rhs, self.initial_state, times)


# ---------------------------------------------------------------------------
# Diffusion schedule, forward and reverse steps
# ---------------------------------------------------------------------------

@dataclass
class DiffusionSchedule:
    """Per-step ``alpha_t`` for ``t = 1..T``; arrays are indexed by ``t - 1``."""

    alpha: np.ndarray
    sigma: np.ndarray | None = None

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.sigma is None:
            self.sigma = np.zeros_like(self.alpha)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.sigma.shape != self.alpha.shape:
            raise ValueError("sigma and alpha must have the same length")

    @property
    def T(self) -> int:
        return len(self.alpha)

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    def check_invariants(self) -> "DiffusionSchedule":
        if not np.all((self.alpha > 0) & (self.alpha < 1)):
            raise ValueError("every alpha_t must lie in (0, 1)")
        if self.alpha_bar[-1] >= 1e-3:
            raise ValueError(
                f"alpha_bar_T = {self.alpha_bar[-1]:.3g}; x_T would not be near-Gaussian")
        return self

    @classmethod
    def linear(cls, T: int = 50, start: float = 0.9999, end: float = 0.72) -> "DiffusionSchedule":
        return cls(np.linspace(start, end, T)).check_invariants()

    def noise_std(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar[t - 1]))

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside [1, {self.T}]")


def forward_diffuse(x0, t: int, noise, schedule: DiffusionSchedule) -> np.ndarray:
    schedule._check_t(t)
    ab = schedule.alpha_bar[t - 1]
    return np.sqrt(ab) * np.asarray(x0, dtype=np.float64) + np.sqrt(1 - ab) * np.asarray(noise)


def reverse_update(x_t, t: int, eps, schedule: DiffusionSchedule, noise=None) -> np.ndarray:
    """One reverse step given an already computed noise prediction."""
    schedule._check_t(t)
    eps = np.asarray(eps, dtype=np.float64)
    ensure_finite(eps, "noise prediction")
    a = schedule.alpha[t - 1]
    ab = schedule.alpha_bar[t - 1]
    out = (np.asarray(x_t) - (1 - a) / np.sqrt(1 - ab) * eps) / np.sqrt(a)
    sigma = schedule.sigma[t - 1]
    if sigma != 0:
        if noise is None:
            raise ValueError("sigma_t > 0 needs caller-supplied noise")
        out = out + sigma * np.asarray(noise)
    return out


def reverse_step(x_t, t: int, denoiser, schedule: DiffusionSchedule, noise=None) -> np.ndarray:
    """``x_{t-1}`` from ``x_t``; ``denoiser(x, t)`` returns the noise prediction."""
    schedule._check_t(t)
    return reverse_update(x_t, t, denoiser(x_t, t), schedule, noise)


# ---------------------------------------------------------------------------
# Trajectory sources
# ---------------------------------------------------------------------------

@runtime_checkable
class TrajectorySource(Protocol):
    """Something a cached sampler can drive step by step.

    ``compute`` is the expensive evaluation whose output gets cached;
    ``complete`` finishes step ``s`` with a (possibly predicted) feature and
    returns the state for step ``s + 1``.
    """

    grid: TimeGrid

    def start(self) -> Any: ...

    def compute(self, state: Any, step_index: int) -> np.ndarray: ...

    def complete(self, state: Any, feature: np.ndarray, step_index: int) -> Any: ...

    def output(self, state: Any) -> np.ndarray | None: ...


class ReplaySource:
    """Feature at step ``s`` is ``fn(s * h)``; predictions do not feed back."""

    def __init__(self, fn: Callable[[float], np.ndarray], grid: TimeGrid, name: str = "replay"):
        self.fn = fn
        self.grid = grid
        self.name = name

    @classmethod
    def from_system(cls, system: LinearSystem, total_steps: int) -> "ReplaySource":
        return cls(lambda t: exact_solution(system, t), TimeGrid(total_steps, system.h), "linear")

    @classmethod
    def from_stiff(cls, problem: StiffTestProblem, grid: TimeGrid) -> "ReplaySource":
        times = np.arange(grid.total_steps) * grid.h
        table = problem.solution(times)
        return cls(lambda t: table[int(round(t / grid.h))], grid, problem.name)

    def start(self):
        return None

    def compute(self, state, step_index):
        return np.asarray(self.fn(self.grid.time(step_index)), dtype=np.float64)

    def complete(self, state, feature, step_index):
        return None

    def output(self, state):
        return None


class DrivenLinearSource:
    """State ``x`` advanced by ``x + h * g`` where the cached feature is ``g = A x``.

    The uncached run is the explicit map ``x -> (I + hA) x``, so errors in a
    predicted ``g`` propagate through that map; its spectral radius is the
    contraction factor of the error recursion.
    """

    def __init__(self, system: LinearSystem, total_steps: int):
        self.system = system
        self.grid = TimeGrid(total_steps, system.h)
        self.name = "driven_linear"

    def start(self):
        return self.system.initial_state.copy()

    def compute(self, state, step_index):
        return state @ self.system.A.T

    def complete(self, state, feature, step_index):
        return state + self.grid.h * feature

    def output(self, state):
        return state


def true_feature_trajectory(source: TrajectorySource) -> np.ndarray:
    """Uncached run: the feature actually computed at every grid step."""
    state = source.start()
    feats = []
    for s in range(source.grid.total_steps):
        f = ensure_finite(np.asarray(source.compute(state, s), dtype=np.float64))
        feats.append(f)
        state = source.complete(state, f, s)
    return np.stack(feats)


def uncached_run(source: TrajectorySource) -> tuple[np.ndarray, np.ndarray | None, list]:
    """Features, final output and the per-step states of an uncached run."""
    state = source.start()
    feats, states = [], []
    for s in range(source.grid.total_steps):
        states.append(state)
        f = ensure_finite(np.asarray(source.compute(state, s), dtype=np.float64))
        feats.append(f)
        state = source.complete(state, f, s)
    return np.stack(feats), source.output(state), states


__all__ = [
    "LinearSystem", "StiffTestProblem", "DiffusionSchedule", "TrajectorySource",
    "ReplaySource", "DrivenLinearSource", "exact_solution", "rk4_integrate",
    "forward_diffuse", "reverse_step", "reverse_update", "true_feature_trajectory",
    "uncached_run", "step_of",
]
