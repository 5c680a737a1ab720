import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from foca.core import CacheSchedule
from foca.denoiser import ToyDenoiser, ToyDenoiserSource
from foca.diagnostics import (build_report, checked_error, local_truncation_error,
                              median_bandwidth, mmd_sample_quality, multi_horizon_forecast_error,
                              relative_error, stiffness_index, stiffness_index_flagged,
                              stiffness_profile, verify_proposition1)
from foca.dynamics import (DrivenLinearSource, LinearSystem, ReplaySource, StiffTestProblem,
                           exact_solution, uncached_run)
from foca.predictors import PredictorKind, cached_features

FOCA, REUSE, TAYLOR2 = (PredictorKind.parse(k) for k in ("foca", "reuse", "taylor2"))


class TestErrors:
    def test_examples(self):
        t = np.array([0.3, -1.2, 4.0])
        assert relative_error(t, t) == 0.0
        assert relative_error(2 * t, t) == pytest.approx(1.0, rel=1e-12)

    def test_degenerate_truth_is_flagged(self):
        err, flag = checked_error([3.0, 4.0], [0.0, 0.0])
        assert flag and err == 5.0
        assert relative_error([3.0, 4.0], [0.0, 0.0]) == pytest.approx(5e12)
        assert checked_error([1.0], [2.0]) == (pytest.approx(0.5), False)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            relative_error([1.0, 2.0], [1.0])

    @given(arrays(np.float64, 4, elements=st.floats(-1e3, 1e3)),
           arrays(np.float64, 4, elements=st.floats(0.5, 1e3)),
           st.floats(1e-3, 1e3))
    def test_scale_invariance(self, p, t, c):
        assert relative_error(c * p, c * t) == pytest.approx(relative_error(p, t), rel=1e-9)


class TestLTE:
    def test_affine_exact(self):
        F = np.array([[2.0 - 0.7 * s, 0.1 * s] for s in range(8)])
        for at in range(1, 7):
            assert local_truncation_error(F, 0.5, at) < 1e-10

    def test_third_order_on_exponential(self):
        def lte(h):
            t = np.arange(0.0, 2.0 + h / 2, h)
            return local_truncation_error(np.exp(-t)[:, None], h, int(round(1.0 / h)))
        e = [lte(h) for h in (0.1, 0.05, 0.025)]
        assert e[0] > 0
        orders = [math.log2(e[i] / e[i + 1]) for i in range(2)]
        assert all(2.7 <= p <= 3.3 for p in orders)
        assert e[0] / e[1] == pytest.approx(8.0, rel=0.1)

    def test_boundaries(self):
        F = np.zeros((5, 1))
        with pytest.raises(IndexError):
            local_truncation_error(F, 1.0, 0)
        with pytest.raises(IndexError):
            local_truncation_error(F, 1.0, 4)
        # last interior step uses the backward derivative
        assert local_truncation_error(np.arange(5.0)[:, None] ** 2, 1.0, 3) >= 0.0


class TestStiffness:
    def test_affine_zero(self):
        F = np.array([[1.0 + 0.3 * s] for s in range(10)])
        assert np.allclose(stiffness_profile(F, 0.1), 0.0)

    def test_degenerate_window_flag(self):
        assert stiffness_index_flagged(np.ones((6, 2)), 1.0, 3) == (0.0, True)
        assert stiffness_index(np.ones((6, 2)), 1.0, 3) == 0.0

    def test_exponential_rate(self):
        t = np.arange(30) * 0.01
        idx = stiffness_index(np.exp(-3.0 * t)[:, None], 0.01, 15)
        # window max of the curvature sits two steps before the window centre
        assert idx == pytest.approx(3.0 * math.exp(2 * 3.0 * 0.01), rel=1e-3)

    def test_two_scale_spike(self):
        p = StiffTestProblem("two_scale")
        h = 0.005
        prof = stiffness_profile(p.solution(np.arange(60) * h), h)
        assert prof[2] >= 10 * prof[-3]

    def test_rotation_constant(self):
        r = LinearSystem([[0.0, 1.0], [-1.0, 0.0]], [1.0, 0.0])
        F = np.stack([exact_solution(r, t) for t in np.arange(40) * 0.1])
        prof = stiffness_profile(F, 0.1)
        assert prof.max() <= 1.2 * prof.min()

    def test_bad_window(self):
        with pytest.raises(ValueError):
            stiffness_index(np.zeros((6, 1)), 1.0, 2, window=1)


class TestErrorBound:
    @pytest.mark.parametrize("rho", [0.1, 0.3, 0.5, 0.7, 0.9])
    def test_foca_within_bound(self, rho):
        r = verify_proposition1(LinearSystem.contractive_rotation(rho, 0.3), 20)
        assert r.verdict and all(r.per_k_pass) and r.sup_pass
        assert len(r.errors) == 20 and r.tau_max > 0

    @pytest.mark.parametrize("rho", [0.1, 0.3, 0.5, 0.7, 0.9])
    def test_reuse_error_grows_with_k(self, rho):
        r = verify_proposition1(LinearSystem.contractive_rotation(rho, 0.3), 20, kind=REUSE)
        assert r.k_growth
        assert all(b > a for a, b in zip(r.errors[:10], r.errors[1:10]))

    def test_rho_zero_degenerates(self):
        r = verify_proposition1(LinearSystem.contractive_rotation(0.0, 0.3), 5)
        assert r.bounds == [r.tau_max] * 5
        assert r.verdict

    def test_rho_half_sup_bound(self):
        r = verify_proposition1(LinearSystem.contractive_rotation(0.5, 0.3), 20)
        assert r.sup_bound == pytest.approx(2 * r.tau_max)

    def test_max_k_zero(self):
        r = verify_proposition1(LinearSystem.contractive_rotation(0.5, 0.3), 0)
        assert r.errors == [] and r.verdict
        assert r.as_dict()["per_k"] == []

    def test_bound_values(self):
        r = verify_proposition1(LinearSystem.contractive_rotation(0.7, 0.3), 4)
        for k, b in enumerate(r.bounds, start=1):
            assert b == pytest.approx((1 - 0.7 ** k) / 0.3 * r.tau_max, rel=1e-12)

    def test_non_contractive_rejected(self):
        with pytest.raises(ValueError, match="rho"):
            verify_proposition1(LinearSystem([[0.0]], [1.0]), 5)
        with pytest.raises(ValueError, match="rho"):
            verify_proposition1(LinearSystem.contractive_rotation(1.2, 0.3), 5)


class TestMMD:
    def test_identical_sets(self):
        x = np.random.default_rng(0).standard_normal((1000, 2))
        assert abs(mmd_sample_quality(x, x.copy())) < 1e-6

    def test_disjoint_point_masses(self):
        a = np.zeros((2, 1))
        b = np.full((2, 1), 100.0)
        # kernel self-terms are 1, cross-terms exp(-10^4 / 2)
        assert mmd_sample_quality(a, b, bandwidth=1.0) == pytest.approx(2.0, abs=1e-12)

    def test_median_bandwidth(self):
        assert median_bandwidth(np.array([[0.0], [1.0], [3.0]])) == 2.0

    def test_errors(self):
        with pytest.raises(ValueError):
            mmd_sample_quality(np.zeros((1, 2)), np.zeros((4, 2)))
        with pytest.raises(ValueError):
            mmd_sample_quality(np.zeros((3, 2)), np.zeros((3, 3)))

    def test_unequal_sizes_separate(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((300, 2)), rng.standard_normal((200, 2)) + 3.0
        assert mmd_sample_quality(a, b) > 0.5


class TestReports:
    def test_report_invariants(self):
        src = ReplaySource.from_system(LinearSystem([[-0.2]], [1.0]), 20)
        sched = CacheSchedule(3, 20, 2)
        run = cached_features(src, sched.is_full_step, FOCA)
        rep = build_report(run, sched, FOCA)
        assert len(rep.records) == 20
        assert rep.acceleration_ratio == 20 / rep.evaluation_count
        assert all(r.rel_error == 0.0 and r.predicted is None for r in rep.records if r.is_full)
        assert rep.records[0].lte == 0.0 and rep.records[-1].lte == 0.0
        assert all(np.isfinite([r.rel_error, r.lte, r.stiffness_index]).all() for r in rep.records)


class TestMultiHorizon:
    def test_horizon_zero(self):
        src = DrivenLinearSource(LinearSystem.contractive_rotation(0.5, 0.3), 30)
        assert multi_horizon_forecast_error(src, {20, 10}, 0, [FOCA]) == {}

    def test_range_checked(self):
        src = DrivenLinearSource(LinearSystem.contractive_rotation(0.5, 0.3), 30)
        with pytest.raises(ValueError):
            multi_horizon_forecast_error(src, {5}, 10, [FOCA])
        with pytest.raises(ValueError):
            multi_horizon_forecast_error(src, {30}, 3, [FOCA])

    def test_deterministic_and_shaped(self):
        model = ToyDenoiser.load()
        src = ToyDenoiserSource.seeded(model, 0, 8)
        a = multi_horizon_forecast_error(src, {30, 20, 10}, 10, [FOCA, TAYLOR2])
        b = multi_horizon_forecast_error(src, {30, 20, 10}, 10, [FOCA, TAYLOR2])
        assert sorted(a) == sorted(b) and len(a) == 6
        for key in a:
            assert a[key].shape == (10,)
            assert a[key].tobytes() == b[key].tobytes()

    def test_contractive_system_below_sup_bound(self):
        system = LinearSystem.contractive_rotation(0.5, 0.3)
        total = 40
        src = DrivenLinearSource(system, total)
        truth = uncached_run(src)
        curves = multi_horizon_forecast_error(src, {30, 20, 10}, 8, [FOCA], truth=truth[:2])
        for (_, t), curve in curves.items():
            first = total - t
            # state error at the end of the window versus the geometric bound
            run = cached_features(src, lambda s, a=first: s < a or s >= a + 8, FOCA,
                                  truth=truth[:2])
            x, taus = src.start(), []
            for s in range(first + 8):
                if s >= first:
                    taus.append(system.h * np.linalg.norm(run.features[s] - system.A @ x))
                x = src.complete(x, run.features[s], s)
            err = np.linalg.norm(x - truth[2][first + 8])
            assert err <= max(taus) / (1 - 0.5) * 1.05
            assert np.all(np.isfinite(curve))
