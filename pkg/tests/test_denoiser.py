from pathlib import Path

import numpy as np
import pytest

from foca.core import CacheSchedule
from foca.denoiser import (DEFAULT_WEIGHTS, MixtureData, ToyDenoiser, ToyDenoiserSource,
                           TrainConfig, holdout_metrics, silu, time_embedding, train_denoiser)
from foca.diagnostics import mmd_sample_quality
from foca.dynamics import DiffusionSchedule, forward_diffuse, uncached_run
from foca.predictors import PredictorKind, run_cached_sampler
from foca.rng import make_rng

GOLDEN = Path(__file__).parent / "golden" / "toy_sampler_seed0.txt"


@pytest.fixture(scope="module")
def model():
    return ToyDenoiser.load()


def test_silu_tails():
    z = np.array([-1e4, -1.0, 0.0, 1.0, 1e4])
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        out = silu(z)
    np.testing.assert_allclose(out, [0.0, -1 / (1 + np.e), 0.0, 1 / (1 + np.exp(-1.0)), 1e4])


def test_time_embedding_range():
    s = DiffusionSchedule.linear()
    e = time_embedding(np.arange(1, 51), s)
    assert e.shape == (50, 5)
    assert e[-1, 0] == 1.0 and np.all(np.abs(e) <= 1.0)


def test_weights_round_trip(model):
    again = ToyDenoiser.loads(model.dumps())
    for name, arr in model.params.items():
        assert np.array_equal(arr, again.params[name])
    assert again.dumps() == DEFAULT_WEIGHTS.read_text()


def test_weights_header_checks(model):
    text = model.dumps()
    with pytest.raises(ValueError, match="version"):
        ToyDenoiser.loads(text.replace("foca-toy-denoiser 1", "foca-toy-denoiser 2", 1))
    with pytest.raises(ValueError):
        ToyDenoiser.loads(text.replace("foca-toy-denoiser", "something-else", 1))


def test_gradients_match_finite_differences():
    rng = make_rng(5, 0)
    m = ToyDenoiser.initialize(rng, hidden=8)
    x = rng.standard_normal((6, 2))
    t = rng.integers(1, 51, size=6)
    target = rng.standard_normal((6, 2))
    _, grads = m.loss_and_grads(x, t, target)
    eps = 1e-6
    for name in ("W1", "b2", "W3"):
        arr = m.params[name]
        idx = (0, 1) if arr.ndim == 2 else (1,)
        old = arr[idx]
        arr[idx] = old + eps
        up = m.loss_and_grads(x, t, target)[0]
        arr[idx] = old - eps
        down = m.loss_and_grads(x, t, target)[0]
        arr[idx] = old
        assert grads[name][idx] == pytest.approx((up - down) / (2 * eps), rel=1e-5, abs=1e-9)


def test_bayes_predictor_beats_noise_guess():
    s = DiffusionSchedule.linear()
    mix = MixtureData()
    rng = make_rng(2, 0)
    x0 = mix.sample(4000, rng)
    t = rng.integers(1, 51, size=4000)
    noise = rng.standard_normal(x0.shape)
    ab = s.alpha_bar[t - 1][:, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * noise
    bayes = np.mean((mix.optimal_eps(x_t, t, s) - noise) ** 2)
    # predicting the noise from x_t alone when x0 is known exactly
    oracle = (x_t - np.sqrt(ab) * x0) / np.sqrt(1 - ab)
    assert np.allclose(oracle, noise)
    assert bayes < np.mean(noise ** 2)
    # at t = T the signal is gone: optimal_eps is nearly x_t itself
    xT = forward_diffuse(x0[:5], 50, noise[:5], s)
    np.testing.assert_allclose(mix.optimal_eps(xT, 50, s), xT, atol=0.05)


def test_shipped_weights_meet_threshold(model):
    data = MixtureData().sample(2000, make_rng(99, 1))
    mse, floor = holdout_metrics(model, data, make_rng(99, 3))
    assert mse - floor < 0.05


def test_sampler_reaches_data(model):
    out = uncached_run(ToyDenoiserSource.seeded(model, 1, 500))[1]
    data = MixtureData().sample(500, make_rng(1, 11))
    assert mmd_sample_quality(out, data) < 0.05


def test_golden_trajectory(model):
    golden = np.loadtxt(GOLDEN)
    out = uncached_run(ToyDenoiserSource.seeded(model, 0, 4))[1]
    cached = run_cached_sampler(ToyDenoiserSource.seeded(model, 0, 4), CacheSchedule(3, 50, 2),
                                PredictorKind.parse("foca")).output
    np.testing.assert_allclose(out, golden[:4], rtol=0, atol=1e-12)
    np.testing.assert_allclose(cached, golden[4:], rtol=0, atol=1e-12)


def test_sampler_deterministic(model):
    a = uncached_run(ToyDenoiserSource.seeded(model, 7, 3))[1]
    b = uncached_run(ToyDenoiserSource.seeded(model, 7, 3))[1]
    assert np.array_equal(a, b)


def test_training_deterministic():
    cfg = TrainConfig(seed=3, n_samples=400, steps=30, batch_size=32, log_every=10)
    a, b = train_denoiser(cfg), train_denoiser(cfg)
    assert a.model.dumps() == b.model.dumps()
    assert a.trace == b.trace and len(a.trace) == 3
    assert a.holdout_mse == b.holdout_mse


def test_untrained_model_misses_threshold():
    r = train_denoiser(TrainConfig(seed=0, n_samples=400, steps=0))
    assert r.trace == []
    assert r.excess_mse > 0.05
