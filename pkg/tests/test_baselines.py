import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kdro.baselines import (
    EQUAL_WIDTH,
    DiscretePolicy,
    assign_bins,
    discrete_dro_evaluate,
    discrete_dro_learn,
    discrete_propensity,
    discretize_treatment,
    floor_probabilities,
    indicator_weights,
)
from kdro.dro import solve_alpha
from kdro.errors import DegenerateBins, KdroError, SeparationDetected
from kdro.model import ObservationSet
from kdro.simgen import DgpSpec, build_dgp


def dataset(n=400, seed=0, d=1):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.1, 1.0, (n, d))
    A = rng.uniform(0.0, 2.0, n)
    Y = rng.uniform(0.0, 1.0, n)
    return ObservationSet(X, A, Y, 5.0)


class TestBinning:
    @pytest.mark.parametrize("k", [2, 3, 4, 7])
    def test_equal_frequency_counts(self, k):
        ds = dataset(n=403)
        spec, bins = discretize_treatment(ds, k)
        counts = np.bincount(bins, minlength=k)
        assert counts.max() - counts.min() <= 1
        assert np.all(np.diff(spec.edges) > 0)
        assert np.all((spec.representative >= spec.edges[:-1]) & (spec.representative <= spec.edges[1:]))

    def test_edges_sit_between_order_statistics(self):
        ds = ObservationSet(np.ones((4, 1)), np.array([4.0, 1.0, 3.0, 2.0]), np.zeros(4), 1.0)
        spec, bins = discretize_treatment(ds, 2)
        assert spec.edges.tolist() == [1.0, 2.5, 4.0]
        assert bins.tolist() == [1, 0, 1, 0]

    def test_new_data_is_clipped_to_outer_bins(self):
        spec, _ = discretize_treatment(dataset(), 3)
        assert assign_bins(spec, [-10.0, 10.0]).tolist() == [0, 2]

    def test_equal_width(self):
        spec, _ = discretize_treatment(dataset(), 4, EQUAL_WIDTH)
        assert np.allclose(np.diff(spec.edges), np.diff(spec.edges)[0])

    def test_rejections(self):
        with pytest.raises(KdroError):
            discretize_treatment(dataset(), 1)
        flat = ObservationSet(np.ones((10, 1)), np.full(10, 1.0), np.zeros(10), 1.0)
        with pytest.raises(DegenerateBins):
            discretize_treatment(flat, 2)


class TestPropensity:
    def test_independent_treatment_gives_bin_frequencies(self):
        ds = dataset(n=4000)
        spec, bins = discretize_treatment(ds, 4)
        fit = discrete_propensity(ds, spec, bins)
        assert np.allclose(fit.probs, 0.25, atol=0.03)
        assert np.allclose(fit.probs.sum(axis=1), 1.0)

    def test_matches_statsmodels_mnlogit(self):
        sm = pytest.importorskip("statsmodels.api")
        rng = np.random.default_rng(4)
        X = rng.normal(size=(1500, 2))
        A = X @ np.array([1.0, -0.5]) + rng.normal(size=1500)
        ds = ObservationSet(X, A, np.zeros(1500), 1.0)
        spec, bins = discretize_treatment(ds, 3)
        fit = discrete_propensity(ds, spec, bins, floor=1e-6)
        ref = sm.MNLogit(bins, sm.add_constant(X)).fit(disp=0, method="newton", maxiter=200)
        assert np.allclose(fit.predict(X), ref.predict(sm.add_constant(X)), atol=1e-6)
        assert fit.log_likelihood == pytest.approx(ref.llf, rel=1e-8)
        assert fit.log_likelihood >= fit.intercept_only_log_likelihood

    def test_floor_and_separation(self):
        X = np.linspace(-1, 1, 200).reshape(-1, 1)
        A = X[:, 0] * 1.0
        ds = ObservationSet(X, A, np.zeros(200), 1.0)
        spec, bins = discretize_treatment(ds, 2)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            fit = discrete_propensity(ds, spec, bins)
        assert any(issubclass(w.category, SeparationDetected) for w in caught)
        assert fit.separated and fit.floor_active
        assert fit.probs.min() >= 0.01 - 1e-15
        assert np.allclose(fit.probs.sum(axis=1), 1.0)

    @given(st.integers(0, 2**32 - 1), st.integers(2, 6))
    def test_floor_probabilities(self, seed, k):
        rng = np.random.default_rng(seed)
        P = rng.dirichlet(np.full(k, 0.2), size=20)
        F = floor_probabilities(P, 0.01)
        assert np.allclose(F.sum(axis=1), 1.0)
        assert F.min() >= 0.01 - 1e-12
        # rows already above the floor are untouched
        ok = (P >= 0.01).all(axis=1)
        assert np.allclose(F[ok], P[ok])


class TestPolicyAndLearning:
    def test_argmax_with_lowest_index_ties(self):
        pol = DiscretePolicy(np.array([[1.0], [3.0], [3.0]]))
        assert pol.apply(np.array([[0.5], [2.0]])).tolist() == [1, 1]
        assert DiscretePolicy(np.array([[5.0], [0.0]])).scores.ravel().tolist() == [3.0, 1.0]

    def test_evaluation_uses_indicator_weights(self):
        ds = dataset()
        spec, bins = discretize_treatment(ds, 2)
        fit = discrete_propensity(ds, spec, bins)
        pol = DiscretePolicy(np.array([[1.0], [3.0]]))
        z = indicator_weights(pol, ds.X, bins, fit.observed)
        assert set(np.unique(z > 0)) <= {True, False}
        assert discrete_dro_evaluate(ds, spec, bins, fit, pol, 0.1).q_value == solve_alpha(z, ds.Y, 0.1).q_value

    def test_learner_picks_the_better_bin(self):
        rng = np.random.default_rng(2)
        n = 1000
        X = rng.uniform(0.1, 1.0, (n, 1))
        A = rng.uniform(0.0, 2.0, n)
        Y = np.where(A > 1.0, 4.0, 1.0) + rng.uniform(-0.5, 0.5, n)
        ds = ObservationSet(X, A, Y, 5.0)
        spec, bins = discretize_treatment(ds, 2)
        fit = discrete_propensity(ds, spec, bins)
        pol = discrete_dro_learn(ds, spec, bins, fit, 0.2)
        assert np.all(pol.apply(X) == 1)

    def test_simple_design_gap_to_continuous(self):
        dgp = build_dgp(DgpSpec())
        ds = dgp.sample(2500, np.random.default_rng(0))
        spec, bins = discretize_treatment(ds, 2)
        fit = discrete_propensity(ds, spec, bins)
        pol = discrete_dro_learn(ds, spec, bins, fit, 0.05)
        q = discrete_dro_evaluate(ds, spec, bins, fit, pol, 0.05).q_value
        assert 5.5 < q < 6.2
