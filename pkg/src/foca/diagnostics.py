"""Error metrics, local truncation error, stiffness index and bound checks.

Everything here is a pure function of finished trajectories or runs. Norms
are Euclidean over all entries, so a batch of features ``(B, d)`` is
treated as one long vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import CacheSchedule, CacheState, step_of
from .dynamics import DrivenLinearSource, LinearSystem, TrajectorySource, uncached_run
from .predictors import CachedRun, PredictorKind, cached_features, predict

ERROR_FLOOR = 1e-12
DEGENERATE_NORM = 1e-12


def _norm(x) -> float:
    return float(np.linalg.norm(np.ravel(x)))


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

def relative_error(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return _norm(pred - truth) / (_norm(truth) + ERROR_FLOOR)


def checked_error(pred, truth) -> tuple[float, bool]:
    """Relative error, or the absolute error plus a flag when ``truth`` is ~0."""
    rel = relative_error(pred, truth)
    if _norm(truth) <= DEGENERATE_NORM:
        return _norm(np.asarray(pred) - np.asarray(truth)), True
    return rel, False


# ---------------------------------------------------------------------------
# Local truncation error and stiffness
# ---------------------------------------------------------------------------

def local_truncation_error(trajectory, h: float, at: int) -> float:
    """Defect of one BDF2 step from exact data, landing on ``at + 1``.

    BDF2 reads ``F[at+1] = 4/3 F[at] - 1/3 F[at-1] + 2h/3 F'[at+1]``. The
    derivative comes from the trajectory itself: a central difference when
    ``at + 2`` exists, else the three-point backward difference. Both are
    second-order accurate, so the defect is ``O(h^3)``.
    """
    F = np.asarray(trajectory, dtype=np.float64)
    n = len(F)
    if not 1 <= at <= n - 2:
        raise IndexError(f"LTE at step {at} needs neighbours in [0, {n})")
    if at + 2 < n:
        deriv = (F[at + 2] - F[at]) / (2 * h)
    else:
        deriv = (3 * F[at + 1] - 4 * F[at] + F[at - 1]) / (2 * h)
    step = (4 * F[at] - F[at - 1]) / 3 + (2 * h / 3) * deriv
    return _norm(step - F[at + 1])


def _curvature_and_motion(F: np.ndarray, h: float):
    # a_j: change of the slope across j; m_j: state motion across j (central)
    a = np.array([_norm(F[j + 1] - 2 * F[j] + F[j - 1]) / h for j in range(1, len(F) - 1)])
    m = np.array([_norm(F[j + 1] - F[j - 1]) / 2 for j in range(1, len(F) - 1)])
    return a, m


def stiffness_index(trajectory, h: float, at: int, window: int = 5) -> float:
    """Slope variation per unit of motion around step ``at``.

    With ``v_j = (F[j+1] - F[j]) / h`` the index is the largest ``|v_j - v_{j-1}|``
    in the window divided by the window's mean ``|F[j+1] - F[j-1]| / 2``.
    For ``dF/dt = lambda F`` it tends to ``|lambda|``. A window without motion
    returns 0; use :func:`stiffness_index_flagged` to see the flag.
    """
    return stiffness_index_flagged(trajectory, h, at, window)[0]


def stiffness_index_flagged(trajectory, h: float, at: int, window: int = 5) -> tuple[float, bool]:
    F = np.asarray(trajectory, dtype=np.float64)
    if window < 2:
        raise ValueError("window must be >= 2")
    if len(F) < 3:
        raise ValueError("stiffness index needs at least 3 trajectory points")
    if not 0 <= at < len(F):
        raise IndexError(f"step {at} outside the trajectory")
    a, m = _curvature_and_motion(F, h)
    lo = min(max(at - window // 2, 1), max(len(F) - 1 - window, 1))
    hi = min(lo + window, len(F) - 1)
    a_w, m_w = a[lo - 1:hi - 1], m[lo - 1:hi - 1]
    mean_motion = float(np.mean(m_w))
    if mean_motion <= 0.0:
        return 0.0, True
    return float(np.max(a_w)) / mean_motion, False


def lte_profile(trajectory, h: float) -> np.ndarray:
    """LTE at every step; 0 at the first and last step, where it is undefined."""
    n = len(trajectory)
    out = np.zeros(n)
    for s in range(1, n - 1):
        out[s] = local_truncation_error(trajectory, h, s)
    return out


def stiffness_profile(trajectory, h: float, window: int = 5) -> np.ndarray:
    return np.array([stiffness_index(trajectory, h, s, window) for s in range(len(trajectory))])


# ---------------------------------------------------------------------------
# Run reports
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    step_index: int
    is_full: bool
    predicted: np.ndarray | None
    truth: np.ndarray
    rel_error: float
    lte: float
    stiffness_index: float
    degenerate_truth: bool = False
    note: str = ""


@dataclass
class RunReport:
    kind: str
    interval: int
    records: list[StepRecord]
    evaluation_count: int
    acceleration_ratio: float
    terminal_sample_deviation: float | None
    mmd_to_data: float | None = None
    aborted: str = ""
    output: np.ndarray | None = None
    notes: dict = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max((r.rel_error for r in self.records), default=0.0)

    @property
    def rel_errors(self) -> np.ndarray:
        return np.array([r.rel_error for r in self.records])


def build_report(run: CachedRun, schedule: CacheSchedule, kind: PredictorKind, *,
                 h: float = 1.0, with_diagnostics: bool = True, window: int = 5) -> RunReport:
    """Per-step records for ``run``; LTE and stiffness describe the uncached trajectory."""
    n = len(run.is_full)
    if with_diagnostics and len(run.truth) >= 3:
        ltes = lte_profile(run.truth, h)
        stiff = stiffness_profile(run.truth, h, window)
    else:
        ltes = stiff = np.zeros(len(run.truth))
    records = []
    for s in range(n):
        full = bool(run.is_full[s])
        truth = run.truth[s]
        if full:
            err, degenerate, pred = 0.0, False, None
        else:
            pred = run.features[s]
            err, degenerate = checked_error(pred, truth)
        records.append(StepRecord(s, full, pred, truth, err, float(ltes[s]), float(stiff[s]),
                                  degenerate, run.notes.get(s, "")))
    deviation = None
    if run.output is not None and run.truth_output is not None:
        deviation = _norm(run.output - run.truth_output)
    evals = run.evaluation_count if run.aborted else schedule.evaluation_count
    return RunReport(kind.label, schedule.interval, records, evals,
                     schedule.total_steps / max(evals, 1), deviation,
                     aborted=run.aborted, output=run.output, notes=dict(run.notes))


# ---------------------------------------------------------------------------
# Error-accumulation bound on a contractive linear system
# ---------------------------------------------------------------------------

@dataclass
class BoundReport:
    """Outcome of :func:`verify_proposition1`.

    ``errors[k-1]`` is the state error after ``k`` consecutive predicted
    steps, ``taus`` the per-step injected defects and ``bounds[k-1]`` the
    geometric bound ``(1 - rho^k) / (1 - rho) * tau_max``.
    """

    kind: str
    rho: float
    tau_max: float
    errors: list[float]
    taus: list[float]
    bounds: list[float]
    per_k_pass: list[bool]
    sup_bound: float
    sup_pass: bool
    k_growth: bool
    feature_errors: list[float]
    slack: float

    @property
    def verdict(self) -> bool:
        return all(self.per_k_pass) and self.sup_pass

    def as_dict(self) -> dict:
        return {
            "kind": self.kind, "rho": self.rho, "tau_max": self.tau_max,
            "slack": self.slack, "verdict": "pass" if self.verdict else "fail",
            "sup_bound": self.sup_bound, "sup_pass": self.sup_pass,
            "k_growth": self.k_growth,
            "per_k": [
                {"k": k, "error": e, "tau": t, "bound": b, "pass": p, "feature_error": fe}
                for k, (e, t, b, p, fe) in enumerate(
                    zip(self.errors, self.taus, self.bounds, self.per_k_pass,
                        self.feature_errors), start=1)
            ],
        }


def verify_proposition1(system: LinearSystem, max_k: int, *,
                        kind: PredictorKind = PredictorKind("foca"),
                        warmup_steps: int = 2, slack: float = 0.05,
                        growth_window: int = 10) -> BoundReport:
    """Run ``max_k`` predicted steps after a fully computed warm start.

    The cached feature is ``g = A x`` and the state moves by ``x + h g``, so an
    error in a predicted ``g`` at step ``j`` injects ``tau_j = h |g_hat - A x_j|``
    and is then propagated by ``I + hA``, whose spectral radius is ``rho``.
    """
    rho = system.contraction_rho
    if not rho < 1.0:
        raise ValueError(f"system is not contractive: rho = {rho:.6g} >= 1")
    if max_k < 0:
        raise ValueError("max_k must be >= 0")
    h = system.h
    total = warmup_steps + 1 + max_k
    source = DrivenLinearSource(system, total)
    _, _, true_states = uncached_run(DrivenLinearSource(system, total + 1))
    cache = CacheState(taylor_capacity=kind.history_capacity)
    x = source.start()
    errors, taus, feat_errors = [], [], []
    for s in range(total):
        if s <= warmup_steps:
            g = source.compute(x, s)
            cache.record_full(s, g, h)
        else:
            g, _ = predict(kind, cache, s, h)
            g_true_here = source.compute(x, s)
            taus.append(h * _norm(g - g_true_here))
            feat_errors.append(_norm(g - source.compute(true_states[s], s)))
        x = source.complete(x, g, s)
        if s > warmup_steps:
            errors.append(_norm(x - true_states[s + 1]))
    tau_max = max(taus, default=0.0)
    bounds = [(1 - rho ** k) / (1 - rho) * tau_max for k in range(1, max_k + 1)]
    per_k = [e <= b * (1 + slack) for e, b in zip(errors, bounds)]
    sup_bound = tau_max / (1 - rho)
    sup_pass = max(errors, default=0.0) <= sup_bound * (1 + slack)
    head = errors[:growth_window]
    k_growth = len(head) >= 2 and all(b > a for a, b in zip(head, head[1:]))
    return BoundReport(kind.label, rho, tau_max, errors, taus, bounds, per_k, sup_bound,
                       sup_pass, k_growth, feat_errors, slack)


# ---------------------------------------------------------------------------
# Multi-horizon forecasts
# ---------------------------------------------------------------------------

def multi_horizon_forecast_error(source: TrajectorySource, start_timesteps, horizon: int,
                                 kinds, *, truth=None) -> dict[tuple[str, int], np.ndarray]:
    """Relative feature error over ``horizon`` predicted steps from each start.

    Starts are reverse timesteps: from timestep ``t`` every earlier step is
    computed in full and the ``horizon`` steps beginning at ``t`` are
    predicted, with predicted features driving the sampler.
    """
    total = source.grid.total_steps
    if truth is None:
        truth_feats, truth_out, _ = uncached_run(source)
        truth = (truth_feats, truth_out)
    curves = {}
    if horizon == 0:
        return curves
    for kind in kinds:
        for t in sorted(start_timesteps, reverse=True):
            first = step_of(t, total)
            if first + horizon > total:
                raise ValueError(f"start timestep {t} + horizon {horizon} exceeds {total} steps")
            if first < 1:
                raise ValueError("a forecast needs at least one computed step before it")
            run = cached_features(source, lambda s, a=first: s < a or s >= a + horizon, kind,
                                  truth=truth)
            if run.aborted:
                raise FloatingPointError(f"{kind.label} from timestep {t}: {run.aborted}")
            curves[(kind.label, t)] = np.array(
                [relative_error(run.features[s], truth[0][s]) for s in range(first, first + horizon)])
    return curves


# ---------------------------------------------------------------------------
# Sample quality
# ---------------------------------------------------------------------------

def median_bandwidth(samples) -> float:
    z = np.asarray(samples, dtype=np.float64)
    sq = np.sum(z * z, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * z @ z.T, 0.0)
    iu = np.triu_indices(len(z), k=1)
    return float(np.sqrt(np.median(d2[iu])))


def _gauss(x, y, bw):
    d2 = np.sum(x * x, 1)[:, None] + np.sum(y * y, 1)[None, :] - 2 * x @ y.T
    return np.exp(-np.maximum(d2, 0.0) / (2 * bw * bw))


def mmd_sample_quality(samples_a, samples_b, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with a Gaussian kernel.

    The bandwidth defaults to the median pairwise distance of the pooled
    samples. Equal-size sets use the paired U-statistic (off-diagonal terms
    only), which is exactly zero for identical sets.
    """
    x = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    y = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    if len(x) < 2 or len(y) < 2:
        raise ValueError("MMD needs at least two samples per set")
    if x.shape[1] != y.shape[1]:
        raise ValueError("sample sets differ in dimension")
    bw = median_bandwidth(np.vstack([x, y])) if bandwidth is None else float(bandwidth)
    if not bw > 0:
        raise ValueError("kernel bandwidth must be positive")
    kxx, kyy, kxy = _gauss(x, x, bw), _gauss(y, y, bw), _gauss(x, y, bw)
    m, n = len(x), len(y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    if m == n:
        sxy = (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
    else:
        sxy = kxy.mean()
    return float(sxx + syy - 2 * sxy)


__all__ = [
    "relative_error", "checked_error", "local_truncation_error", "stiffness_index",
    "stiffness_index_flagged", "lte_profile", "stiffness_profile", "StepRecord",
    "RunReport", "build_report", "BoundReport", "verify_proposition1",
    "multi_horizon_forecast_error", "median_bandwidth", "mmd_sample_quality",
]
