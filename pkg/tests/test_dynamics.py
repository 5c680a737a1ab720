import math

import numpy as np
import pytest

from foca.core import NonFiniteError, TimeGrid
from foca.dynamics import (DiffusionSchedule, DrivenLinearSource, LinearSystem, ReplaySource,
                           StiffTestProblem, exact_solution, forward_diffuse, reverse_step,
                           reverse_update, rk4_integrate, true_feature_trajectory, uncached_run)


class TestLinearSystem:
    def test_zero_dynamics(self):
        s = LinearSystem(np.zeros((3, 3)), [1.0, -2.0, 0.5])
        assert exact_solution(s, 7.3).tolist() == [1.0, -2.0, 0.5]

    def test_scalar_decay(self):
        s = LinearSystem([[-1.0]], [1.0])
        assert exact_solution(s, 1.0)[0] == pytest.approx(0.36787944117144233, abs=1e-15)

    def test_rotation(self):
        s = LinearSystem([[0.0, 1.0], [-1.0, 0.0]], [1.0, 0.0])
        np.testing.assert_allclose(exact_solution(s, math.pi / 2), [0.0, -1.0], atol=1e-12)

    def test_semigroup(self):
        A = np.array([[-0.3, 0.8], [-0.5, -0.1]])
        s = LinearSystem(A, [0.7, -1.1])
        half = LinearSystem(A, exact_solution(s, 0.6))
        np.testing.assert_allclose(exact_solution(half, 0.9), exact_solution(s, 1.5), atol=1e-10)

    def test_overflow(self):
        with pytest.raises(NonFiniteError):
            exact_solution(LinearSystem([[800.0]], [1.0]), 1.0)
        with pytest.raises(ValueError):
            exact_solution(LinearSystem([[1.0]], [1.0]), -1.0)

    def test_shape_check(self):
        with pytest.raises(ValueError):
            LinearSystem(np.eye(3), [1.0, 2.0])

    @pytest.mark.parametrize("rho", [0.0, 0.1, 0.5, 0.9])
    def test_contractive_rotation(self, rho):
        s = LinearSystem.contractive_rotation(rho, 0.4, h=0.5)
        assert s.contraction_rho == pytest.approx(rho, abs=1e-12)
        # normal step map: spectral norm equals spectral radius
        assert np.linalg.norm(s.step_map, 2) == pytest.approx(rho, abs=1e-12)

    def test_reference_integrator_matches_closed_form(self):
        A = np.array([[-0.3, 0.8], [-0.5, -0.1]])
        s = LinearSystem(A, [0.7, -1.1])
        times = [0.0, 0.5, 1.0, 2.0]
        ref = rk4_integrate(s.rhs, s.initial_state, times, substeps=1000)
        exact = np.stack([exact_solution(s, t) for t in times])
        np.testing.assert_allclose(ref, exact, atol=1e-12)


class TestStiffProblems:
    def test_two_scale(self):
        p = StiffTestProblem("two_scale")
        assert p.stiffness_ratio == 100.0
        sol = p.solution([0.0, 0.01])
        np.testing.assert_allclose(sol[1], [math.exp(-1.0), math.exp(-0.01)], rtol=1e-14)

    def test_ratio_enforced(self):
        with pytest.raises(ValueError):
            StiffTestProblem("two_scale", {"lambda_fast": -10.0, "lambda_slow": -1.0})
        with pytest.raises(ValueError):
            StiffTestProblem("robertson")

    def test_van_der_pol(self):
        p = StiffTestProblem("van_der_pol", {"mu": 5.0})
        assert p.stiffness_ratio == 5.0
        sol = p.solution([0.0, 0.1, 0.2])
        assert np.all(np.isfinite(sol)) and sol.shape == (3, 2)
        # a coarser reference agrees, so the h/1000 reference is converged
        coarse = rk4_integrate(p.rhs, p.initial_state, [0.0, 0.1, 0.2], substeps=250)
        np.testing.assert_allclose(sol, coarse, atol=1e-9)


class TestDiffusion:
    def test_schedule_invariants(self):
        s = DiffusionSchedule.linear()
        assert s.T == 50
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert s.alpha_bar[-1] < 1e-3
        s.check_invariants()

    def test_schedule_rejects_bad_alpha(self):
        with pytest.raises(ValueError):
            DiffusionSchedule(np.array([0.9, 1.0])).check_invariants()

    def test_forward_examples(self):
        ones = DiffusionSchedule(np.array([1.0 - 1e-16]))
        # alpha_bar within one ulp of 1: x0 back
        assert forward_diffuse([3.0], 1, [5.0], ones)[0] == pytest.approx(3.0, abs=1e-7)
        s = DiffusionSchedule(np.array([0.25]))
        assert forward_diffuse([2.0], 1, [4.0], s)[0] == pytest.approx(1 + 2 * math.sqrt(3), abs=1e-14)

    def test_forward_out_of_range(self):
        with pytest.raises(IndexError):
            forward_diffuse([0.0], 0, [0.0], DiffusionSchedule.linear())

    def test_noise_identity(self):
        s = DiffusionSchedule.linear()
        rng = np.random.default_rng(3)
        x0, eps = rng.standard_normal(5), rng.standard_normal(5)
        for t in (1, 17, 50):
            xt = forward_diffuse(x0, t, eps, s)
            ab = s.alpha_bar[t - 1]
            np.testing.assert_allclose((xt - math.sqrt(1 - ab) * eps) / math.sqrt(ab), x0, atol=1e-12)

    def test_reverse_examples(self):
        s = DiffusionSchedule(np.array([0.81]))
        assert reverse_update([0.9], 1, [0.0], s)[0] == pytest.approx(1.0, abs=1e-15)
        zero = lambda x, t: np.zeros_like(x)
        assert reverse_step(np.array([0.9]), 1, zero, s)[0] == pytest.approx(1.0, abs=1e-15)

    def test_reverse_formula(self):
        s = DiffusionSchedule(np.array([0.9, 0.8]))
        x, eps, t = np.array([1.3]), np.array([-0.4]), 2
        a, ab = 0.8, 0.9 * 0.8
        want = (x - (1 - a) / math.sqrt(1 - ab) * eps) / math.sqrt(a)
        np.testing.assert_allclose(reverse_update(x, t, eps, s), want, rtol=1e-15)

    def test_reverse_non_finite(self):
        s = DiffusionSchedule(np.array([0.5]))
        with pytest.raises(NonFiniteError):
            reverse_step(np.array([1.0]), 1, lambda x, t: np.array([np.nan]), s)


class TestSources:
    def test_constant_for_zero_system(self):
        src = ReplaySource.from_system(LinearSystem(np.zeros((2, 2)), [1.0, 2.0]), 5)
        assert np.all(true_feature_trajectory(src) == np.array([1.0, 2.0]))

    def test_scalar_replay(self):
        src = ReplaySource.from_system(LinearSystem([[-0.5]], [1.0], h=1.0), 4)
        np.testing.assert_allclose(true_feature_trajectory(src)[:, 0],
                                   [1.0, math.exp(-0.5), math.exp(-1.0), math.exp(-1.5)],
                                   atol=1e-12)

    def test_stiff_replay_grid(self):
        p = StiffTestProblem("two_scale")
        src = ReplaySource.from_stiff(p, TimeGrid(6, 0.01))
        np.testing.assert_allclose(true_feature_trajectory(src)[3], p.solution([0.03])[0])

    def test_driven_linear_is_explicit_map(self):
        system = LinearSystem.contractive_rotation(0.5, 0.3)
        feats, out, states = uncached_run(DrivenLinearSource(system, 4))
        x = system.initial_state
        for s in range(4):
            np.testing.assert_allclose(states[s], x, atol=1e-15)
            np.testing.assert_allclose(feats[s], system.A @ x, atol=1e-15)
            x = system.step_map @ x
        np.testing.assert_allclose(out, x, atol=1e-15)
