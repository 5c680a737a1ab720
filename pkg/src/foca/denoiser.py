"""Toy MLP noise predictor on a 2-D Gaussian mixture, and its sampler source.

Network::

    [x (2), emb(t) (5)] -> Linear -> SiLU   (cached layer, width w)
                        -> Linear -> SiLU
                        -> Linear -> eps (2)

``emb(t)`` is a low-frequency sinusoidal code of ``tau = t / T``:
``[tau, sin(pi tau), cos(pi tau), sin(2 pi tau), cos(2 pi tau)]``.

Weights file (text, one token per whitespace)::

    foca-toy-denoiser 1
    x_dim 2
    emb_dim 5
    hidden 64
    T 50
    alpha_start 0.9999
    alpha_end 0.72
    arrays 6
    W1 7 64
    <7 lines of 64 values, row-major>
    b1 1 64
    ...

Values are written with 17 significant digits so a round trip is exact.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import TimeGrid, ensure_finite, timestep_of
from .dynamics import DiffusionSchedule, forward_diffuse, reverse_update
from .rng import make_rng

log = logging.getLogger(__name__)

FORMAT_TAG = "foca-toy-denoiser"
FORMAT_VERSION = 1
EMB_DIM = 5
_ARRAY_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")

DEFAULT_WEIGHTS = Path(__file__).parent / "data" / "toy_denoiser_v1.txt"


def silu(z):
    # exp(-z) overflows to inf for very negative z; the quotient is still the right limit
    with np.errstate(over="ignore"):
        return z / (1.0 + np.exp(-z))


def _silu_grad(z):
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def time_embedding(t, schedule: DiffusionSchedule) -> np.ndarray:
    tau = np.atleast_1d(np.asarray(t, dtype=np.float64)) / schedule.T
    return np.stack([tau, np.sin(np.pi * tau), np.cos(np.pi * tau),
                     np.sin(2 * np.pi * tau), np.cos(2 * np.pi * tau)], axis=-1)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MixtureData:
    means: tuple = ((2.0, 0.0), (-2.0, 0.0))
    std: float = 0.3

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        means = np.asarray(self.means)
        comp = rng.integers(0, len(means), size=n)
        return means[comp] + self.std * rng.standard_normal((n, means.shape[1]))

    def optimal_eps(self, x_t, t, schedule: DiffusionSchedule) -> np.ndarray:
        """Posterior mean of the noise given ``x_t``; the MSE-optimal predictor."""
        x_t = np.atleast_2d(x_t)
        t = np.broadcast_to(np.atleast_1d(t), (x_t.shape[0],))
        ab = schedule.alpha_bar[t - 1][:, None]
        var = ab * self.std ** 2 + (1 - ab)
        means = np.asarray(self.means)
        d = x_t[:, None, :] - np.sqrt(ab)[:, None] * means[None]
        logp = -0.5 * (d ** 2).sum(-1) / var
        w = np.exp(logp - logp.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        return (w[:, :, None] * d).sum(1) * np.sqrt(1 - ab) / var


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

@dataclass
class ToyDenoiser:
    schedule: DiffusionSchedule
    params: dict = field(default_factory=dict)
    x_dim: int = 2
    hidden: int = 64
    alpha_start: float = 0.9999
    alpha_end: float = 0.72

    @classmethod
    def initialize(cls, rng: np.random.Generator, *, x_dim=2, hidden=64, T=50,
                   alpha_start=0.9999, alpha_end=0.72) -> "ToyDenoiser":
        sched = DiffusionSchedule.linear(T, alpha_start, alpha_end)
        fan_in = x_dim + EMB_DIM

        def dense(n_in, n_out):
            return rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)

        params = {
            "W1": dense(fan_in, hidden), "b1": np.zeros(hidden),
            "W2": dense(hidden, hidden), "b2": np.zeros(hidden),
            "W3": dense(hidden, x_dim) * 0.1, "b3": np.zeros(x_dim),
        }
        return cls(sched, params, x_dim, hidden, alpha_start, alpha_end)

    @property
    def T(self) -> int:
        return self.schedule.T

    def _inputs(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        emb = time_embedding(t, self.schedule)
        emb = np.broadcast_to(emb, (x.shape[0], EMB_DIM))
        return np.concatenate([x, emb], axis=1)

    def feature(self, x, t) -> np.ndarray:
        """Activation of the cached (first hidden) layer, shape ``(B, hidden)``."""
        p = self.params
        return silu(self._inputs(x, t) @ p["W1"] + p["b1"])

    def head(self, feature) -> np.ndarray:
        """Remaining layers: cached activation to noise prediction."""
        p = self.params
        return silu(feature @ p["W2"] + p["b2"]) @ p["W3"] + p["b3"]

    def __call__(self, x, t) -> np.ndarray:
        return self.head(self.feature(x, t))

    # -- training -----------------------------------------------------------

    def loss_and_grads(self, x, t, target):
        p = self.params
        inp = self._inputs(x, t)
        z1 = inp @ p["W1"] + p["b1"]
        a1 = silu(z1)
        z2 = a1 @ p["W2"] + p["b2"]
        a2 = silu(z2)
        out = a2 @ p["W3"] + p["b3"]
        diff = out - target
        loss = float(np.mean(diff ** 2))
        g_out = 2.0 * diff / diff.size
        grads = {"W3": a2.T @ g_out, "b3": g_out.sum(0)}
        g_z2 = (g_out @ p["W3"].T) * _silu_grad(z2)
        grads["W2"] = a1.T @ g_z2
        grads["b2"] = g_z2.sum(0)
        g_z1 = (g_z2 @ p["W2"].T) * _silu_grad(z1)
        grads["W1"] = inp.T @ g_z1
        grads["b1"] = g_z1.sum(0)
        return loss, grads

    # -- serialization ------------------------------------------------------

    def dumps(self) -> str:
        buf = io.StringIO()
        buf.write(f"{FORMAT_TAG} {FORMAT_VERSION}\n")
        buf.write(f"x_dim {self.x_dim}\nemb_dim {EMB_DIM}\nhidden {self.hidden}\n")
        buf.write(f"T {self.T}\nalpha_start {self.alpha_start!r}\nalpha_end {self.alpha_end!r}\n")
        buf.write(f"arrays {len(_ARRAY_NAMES)}\n")
        for name in _ARRAY_NAMES:
            arr = np.atleast_2d(self.params[name])
            buf.write(f"{name} {arr.shape[0]} {arr.shape[1]}\n")
            for row in arr:
                buf.write(" ".join(f"{v:.17g}" for v in row) + "\n")
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), newline="\n")

    @classmethod
    def loads(cls, text: str) -> "ToyDenoiser":
        lines = iter(text.splitlines())
        tag, version = next(lines).split()
        if tag != FORMAT_TAG:
            raise ValueError(f"not a toy denoiser file (header {tag!r})")
        if int(version) != FORMAT_VERSION:
            raise ValueError(f"unsupported weights format version {version}")
        header = {}
        for _ in range(7):
            key, value = next(lines).split()
            header[key] = value
        if int(header["emb_dim"]) != EMB_DIM:
            raise ValueError("embedding size mismatch")
        params = {}
        for _ in range(int(header["arrays"])):
            name, rows, cols = next(lines).split()
            rows, cols = int(rows), int(cols)
            arr = np.array([[float(v) for v in next(lines).split()] for _ in range(rows)])
            if arr.shape != (rows, cols):
                raise ValueError(f"array {name} has shape {arr.shape}, header says {(rows, cols)}")
            params[name] = arr[0] if name.startswith("b") else arr
        sched = DiffusionSchedule.linear(int(header["T"]), float(header["alpha_start"]),
                                         float(header["alpha_end"]))
        return cls(sched, params, int(header["x_dim"]), int(header["hidden"]),
                   float(header["alpha_start"]), float(header["alpha_end"]))

    @classmethod
    def load(cls, path=None) -> "ToyDenoiser":
        return cls.loads(Path(path or DEFAULT_WEIGHTS).read_text())


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    n_samples: int = 10_000
    holdout_fraction: float = 0.2
    hidden: int = 64
    T: int = 50
    alpha_start: float = 0.9999
    alpha_end: float = 0.72
    steps: int = 20_000
    batch_size: int = 256
    learning_rate: float = 0.1
    excess_mse_threshold: float = 0.05
    log_every: int = 500


@dataclass
class TrainResult:
    model: ToyDenoiser
    trace: list[tuple[int, float]]
    holdout_mse: float
    bayes_mse: float

    @property
    def excess_mse(self) -> float:
        return self.holdout_mse - self.bayes_mse


def _noised_batch(data, rng, schedule):
    t = rng.integers(1, schedule.T + 1, size=len(data))
    noise = rng.standard_normal(data.shape)
    ab = schedule.alpha_bar[t - 1][:, None]
    return np.sqrt(ab) * data + np.sqrt(1 - ab) * noise, t, noise


def holdout_metrics(model: ToyDenoiser, data: np.ndarray, rng, mixture=MixtureData()):
    """Held-out MSE of ``model`` and of the Bayes-optimal predictor on the same draws."""
    x_t, t, noise = _noised_batch(data, rng, model.schedule)
    mse = float(np.mean((model(x_t, t) - noise) ** 2))
    floor = float(np.mean((mixture.optimal_eps(x_t, t, model.schedule) - noise) ** 2))
    return mse, floor


def train_denoiser(cfg: TrainConfig = TrainConfig(), mixture=MixtureData()) -> TrainResult:
    """Plain minibatch SGD on the noise-prediction objective.

    Random streams: 0 initial weights, 1 dataset, 2 minibatches, 3 held-out draws.
    """
    model = ToyDenoiser.initialize(make_rng(cfg.seed, 0), hidden=cfg.hidden, T=cfg.T,
                                   alpha_start=cfg.alpha_start, alpha_end=cfg.alpha_end)
    data = mixture.sample(cfg.n_samples, make_rng(cfg.seed, 1))
    n_hold = int(round(cfg.n_samples * cfg.holdout_fraction))
    train, hold = data[n_hold:], data[:n_hold]
    batch_rng = make_rng(cfg.seed, 2)
    trace = []
    running = None
    for step in range(1, cfg.steps + 1):
        idx = batch_rng.integers(0, len(train), size=cfg.batch_size)
        x_t, t, noise = _noised_batch(train[idx], batch_rng, model.schedule)
        loss, grads = model.loss_and_grads(x_t, t, noise)
        for name, g in grads.items():
            model.params[name] -= cfg.learning_rate * g
        running = loss if running is None else 0.99 * running + 0.01 * loss
        if step % cfg.log_every == 0 or step == cfg.steps:
            trace.append((step, running))
            log.debug("step %d loss %.5f", step, running)
    for arr in model.params.values():
        ensure_finite(arr, "trained weights")
    mse, floor = holdout_metrics(model, hold, make_rng(cfg.seed, 3), mixture)
    return TrainResult(model, trace, mse, floor)


# ---------------------------------------------------------------------------
# Sampler source
# ---------------------------------------------------------------------------

class ToyDenoiserSource:
    """Deterministic reverse sampler whose first hidden activation is cached.

    A predicted activation goes through the remaining layers, so its error
    reaches ``x`` through the reverse update and every later feature.
    """

    name = "toy_denoiser"

    def __init__(self, model: ToyDenoiser, x_T: np.ndarray):
        self.model = model
        self.x_T = np.atleast_2d(np.asarray(x_T, dtype=np.float64))
        self.grid = TimeGrid(model.T, 1.0)

    @classmethod
    def seeded(cls, model: ToyDenoiser, seed: int, batch: int = 1, stream: int = 10):
        x_T = make_rng(seed, stream).standard_normal((batch, model.x_dim))
        return cls(model, x_T)

    def start(self):
        return self.x_T.copy()

    def compute(self, state, step_index):
        return self.model.feature(state, timestep_of(step_index, self.model.T))

    def complete(self, state, feature, step_index):
        t = timestep_of(step_index, self.model.T)
        return reverse_update(state, t, self.model.head(feature), self.model.schedule)

    def output(self, state):
        return state


__all__ = [
    "ToyDenoiser", "ToyDenoiserSource", "MixtureData", "TrainConfig", "TrainResult",
    "train_denoiser", "holdout_metrics", "time_embedding", "forward_diffuse",
    "DEFAULT_WEIGHTS",
]
