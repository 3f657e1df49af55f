import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_instance
from kdro.dro import (
    AmbiguityConfig,
    SolverOptions,
    dual_gradient,
    dual_hessian,
    dual_objective,
    evaluate_policy,
    log_w_hat,
    normalized_ipw_value,
    s_n,
    solve_alpha,
    w_bar,
    w_hat,
    weight_vector,
)
from kdro.errors import AllWeightsZero, KdroError
from kdro.kernels import KernelConfig
from kdro.model import ObservationSet, ScalarMultiple, UniformShift
from oracles import bernoulli_worst_mean, display_form_derivatives, grid_dual, mp_derivatives


def instances(seed, count):
    rng = np.random.default_rng(seed)
    return [random_instance(rng) for _ in range(count)]


class TestEstimatorPieces:
    def test_weight_vector_matches_hand_computation(self):
        X = np.array([[0.5], [0.2]])
        A = np.array([1.0, 0.9])
        ds = ObservationSet(X, A, np.array([6.0, 5.5]), 7.0)
        prop = UniformShift()
        k = KernelConfig("epanechnikov", 0.5)
        z = weight_vector(ds, prop, ScalarMultiple(2.0), k)
        # pi(X) - A = 0 and -0.5; f0 = 1 on [X, X + 1]
        assert z == pytest.approx([0.75 / 0.5, 0.0])

    def test_normalised_estimator_is_ratio(self, rng):
        z, y, _ = random_instance(rng)
        alpha = 0.7
        assert w_hat(z, y, alpha) == pytest.approx(w_bar(z, y, alpha) / s_n(z), rel=1e-12)
        assert math.exp(log_w_hat(z, y, alpha)) == pytest.approx(w_hat(z, y, alpha), rel=1e-12)

    def test_all_zero_weights(self):
        with pytest.raises(AllWeightsZero):
            s_n(np.zeros(4))
        with pytest.raises(AllWeightsZero):
            solve_alpha(np.zeros(4), np.ones(4), 0.1)

    def test_negative_radius_rejected(self):
        with pytest.raises(KdroError):
            AmbiguityConfig(-0.1)
        with pytest.raises(KdroError):
            solve_alpha(np.ones(3), np.ones(3), -1.0)

    def test_log_w_hat_survives_underflow(self):
        z = np.ones(3)
        y = np.array([900.0, 1000.0, 1100.0])
        assert log_w_hat(z, y, 1.0) == pytest.approx(-900.0 - math.log(3.0), abs=1e-9)


class TestSolverAgainstOracles:
    @pytest.mark.parametrize("seed", range(4))
    def test_grid_search_oracle(self, seed):
        for z, y, eta in instances(seed, 25):
            sol = solve_alpha(z, y, eta)
            a_ref, v_ref = grid_dual(z, y, eta)
            assert sol.converged
            assert sol.q_value == pytest.approx(v_ref, abs=1e-7)
            assert abs(sol.alpha_star - a_ref) <= 1e-5 * max(1.0, a_ref)

    def test_high_precision_derivatives(self):
        rng = np.random.default_rng(99)
        for z, y, eta in instances(7, 30):
            alpha = float(np.exp(rng.uniform(np.log(0.05), np.log(50.0))))
            g_ref, h_ref = mp_derivatives(z, y, eta, alpha)
            assert dual_gradient(z, y, alpha, eta) == pytest.approx(g_ref, rel=1e-6, abs=1e-12)
            assert dual_hessian(z, y, alpha, eta) == pytest.approx(h_ref, rel=1e-6, abs=1e-12)

    def test_display_form_derivatives(self):
        rng = np.random.default_rng(5)
        for z, y, eta in instances(8, 50):
            alpha = float(np.exp(rng.uniform(np.log(0.1), np.log(20.0))))
            g_ref, h_ref = display_form_derivatives(z, y, eta, alpha)
            assert dual_gradient(z, y, alpha, eta) == pytest.approx(g_ref, rel=1e-9, abs=1e-12)
            # the display form subtracts two terms of size max(y)^2 / alpha^3, losing digits
            cancel = 1e-13 * float(np.max(y)) ** 2 / alpha**3
            assert dual_hessian(z, y, alpha, eta) == pytest.approx(h_ref, rel=1e-9, abs=cancel)

    @pytest.mark.parametrize("p,eta", [(0.5, 0.05), (0.3, 0.2), (0.8, 0.01), (0.9, 1.0), (0.5, 0.69)])
    def test_bernoulli_worst_case_mean(self, p, eta):
        # equal weights on a 0/1 sample with a fraction p of ones
        n = 1000
        y = np.zeros(n)
        y[: int(round(p * n))] = 1.0
        sol = solve_alpha(np.ones(n), y, eta)
        assert sol.q_value == pytest.approx(bernoulli_worst_mean(p, eta), abs=1e-7)

    def test_boundary_solution(self):
        # mass 0.9 at the minimum: phi'(0+) = -eta - log 0.9 < 0 for eta = 0.2
        y = np.array([1.0] * 9 + [3.0])
        sol = solve_alpha(np.ones(10), y, 0.2)
        assert sol.boundary and sol.alpha_star == 0.0 and sol.q_value == 1.0

    def test_single_observation(self):
        sol = solve_alpha(np.array([2.0]), np.array([4.2]), 0.3)
        assert sol.q_value == 4.2

    def test_zero_radius_is_weighted_mean(self, rng):
        z, y, _ = random_instance(rng)
        sol = solve_alpha(z, y, 0.0)
        assert math.isinf(sol.alpha_star)
        assert sol.q_value == pytest.approx(float(z @ y / z.sum()), rel=1e-12)
        assert normalized_ipw_value(z, y) == pytest.approx(sol.q_value, rel=1e-12)

    def test_constant_outcomes(self):
        sol = solve_alpha(np.array([1.0, 3.0, 0.5]), np.full(3, 2.5), 0.4)
        assert sol.q_value == pytest.approx(2.5)

    def test_zero_weight_rows_are_ignored(self, rng):
        z, y, eta = random_instance(rng)
        z2 = np.concatenate([z, [0.0, 0.0]])
        y2 = np.concatenate([y, [-100.0, 100.0]])
        assert solve_alpha(z2, y2, eta).q_value == pytest.approx(solve_alpha(z, y, eta).q_value, rel=1e-12)

    def test_dual_objective_limit_at_zero(self):
        y = np.array([2.0, 5.0])
        assert dual_objective(np.ones(2), y, 0.0, 0.1) == 2.0
        assert dual_objective(np.ones(2), y, 1e-4, 0.1) == pytest.approx(2.0 - 1e-4 * (0.1 + math.log(0.5)), abs=1e-9)


class TestInvariants:
    @given(st.integers(0, 2**32 - 1))
    def test_value_bracketed_by_min_and_mean(self, seed):
        z, y, eta = random_instance(np.random.default_rng(seed))
        q = solve_alpha(z, y, eta).q_value
        assert y.min() - 1e-12 <= q <= z @ y / z.sum() + 1e-12

    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
    def test_normalisation_invariance(self, seed, c):
        z, y, eta = random_instance(np.random.default_rng(seed))
        a = solve_alpha(z, y, eta)
        b = solve_alpha(c * z, y, eta)
        assert b.q_value == pytest.approx(a.q_value, rel=1e-10, abs=1e-10)

    @given(st.integers(0, 2**32 - 1))
    def test_monotone_in_radius(self, seed):
        z, y, _ = random_instance(np.random.default_rng(seed))
        values = [solve_alpha(z, y, e).q_value for e in (0.0, 0.01, 0.05, 0.2, 0.5, 1.0, 3.0)]
        assert all(b <= a + 1e-10 for a, b in zip(values, values[1:]))

    @given(st.integers(0, 2**32 - 1))
    def test_concavity_and_optimality(self, seed):
        z, y, eta = random_instance(np.random.default_rng(seed))
        sol = solve_alpha(z, y, eta)
        alphas = np.exp(np.linspace(-4, 4, 25))
        assert all(dual_hessian(z, y, a, eta) <= 1e-15 for a in alphas)
        phis = [dual_objective(z, y, a, eta) for a in alphas]
        assert max(phis) <= sol.q_value + 1e-9

    def test_solver_options_respected(self, rng):
        z, y, eta = random_instance(rng)
        tight = solve_alpha(z, y, eta, SolverOptions(max_iter=3))
        assert tight.iterations <= 3 or tight.boundary


def test_evaluate_policy_end_to_end():
    from kdro.simgen import DgpSpec, build_dgp

    dgp = build_dgp(DgpSpec())
    ds = dgp.sample(2500, np.random.default_rng(0))
    sol = evaluate_policy(ds, dgp.propensity, ScalarMultiple(2.0), KernelConfig("epanechnikov", 0.1), 0.05)
    assert 5.5 <= sol.q_value <= 6.8
    assert sol.converged and sol.alpha_star > 0
