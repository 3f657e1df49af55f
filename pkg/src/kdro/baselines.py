"""Discretised-treatment robust baseline.

Continuous treatments are binned into ``k`` categories, the bin
propensities are fitted by multinomial logistic regression and policies
pick a bin by ``argmax_j s_j' x`` over per-bin linear scores.  Matched rows
get indicator weights ``1{pi(X_i) = bin(A_i)} / p_hat(bin(A_i) | X_i)``
which are fed through the same dual solver as the kernel estimator.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import log_softmax, logsumexp

from .dro import DualSolution, SolverOptions, solve_alpha
from .errors import DegenerateBins, DegeneratePolicySearch, KdroError, SeparationDetected
from .model import ObservationSet

logger = logging.getLogger(__name__)

EQUAL_FREQUENCY = "equal_frequency"
EQUAL_WIDTH = "equal_width"


@dataclass(frozen=True, eq=False)
class DiscretizationSpec:
    k: int
    edges: np.ndarray
    representative: np.ndarray
    rule: str = EQUAL_FREQUENCY

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "rule": self.rule,
            "edges": [float(v) for v in self.edges],
            "representative": [float(v) for v in self.representative],
        }


def assign_bins(spec: DiscretizationSpec, A) -> np.ndarray:
    """Bin index of each treatment; values outside the edges go to the outer bins."""
    return np.searchsorted(spec.edges[1:-1], np.asarray(A, dtype=float), side="right")


def discretize_treatment(ds: ObservationSet, k: int, rule: str = EQUAL_FREQUENCY):
    """Split the observed treatments into ``k`` bins.

    Equal-frequency edges sit midway between the order statistics at the
    ``j N / k`` boundaries, so bin counts differ by at most one for
    distinct treatments.

    Returns
    -------
    spec : DiscretizationSpec
    bins : ndarray of int, shape (N,)
    """
    if k < 2:
        raise KdroError("discretisation needs k >= 2")
    if ds.n < k:
        raise DegenerateBins(f"cannot form {k} bins from {ds.n} observations")
    a = np.sort(ds.A)
    if rule == EQUAL_FREQUENCY:
        cuts = [(j * ds.n) // k for j in range(1, k)]
        inner = [0.5 * (a[c - 1] + a[c]) for c in cuts]
    elif rule == EQUAL_WIDTH:
        inner = list(np.linspace(a[0], a[-1], k + 1)[1:-1])
    else:
        raise KdroError(f"unknown binning rule {rule!r}")
    edges = np.array([a[0]] + inner + [a[-1]])
    if np.any(np.diff(edges) <= 0):
        raise DegenerateBins("bin edges are not strictly increasing")
    spec0 = DiscretizationSpec(k, edges, np.zeros(k), rule)
    bins = assign_bins(spec0, ds.A)
    rep = np.empty(k)
    for j in range(k):
        members = ds.A[bins == j]
        if members.size == 0:
            raise DegenerateBins(f"bin {j} is empty")
        if members.max() == members.min() and members.size > 1 and k > 1:
            raise DegenerateBins(f"bin {j} has zero width")
        rep[j] = 0.5 * (members.min() + members.max())
    return DiscretizationSpec(k, edges, rep, rule), bins


# ----------------------------------------------------------------------------
# Multinomial logistic propensity


@dataclass(frozen=True, eq=False)
class DiscretePropensityFit:
    """Fitted bin probabilities ``p_hat(j | X_i)``."""

    probs: np.ndarray  # (N, k), rows sum to one, entries >= floor
    observed: np.ndarray  # (N,) probability of the observed bin
    coef: np.ndarray  # (k, d + 1) on standardised covariates, row 0 is the reference
    log_likelihood: float
    intercept_only_log_likelihood: float
    separated: bool = False
    floor_active: bool = False
    x_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    x_scale: np.ndarray = field(default_factory=lambda: np.ones(0))

    def predict(self, X) -> np.ndarray:
        """Unfloored probabilities for new covariates."""
        Z = (np.asarray(X, dtype=float) - self.x_mean) / self.x_scale
        logits = np.column_stack([np.ones(Z.shape[0]), Z]) @ self.coef.T
        return np.exp(log_softmax(logits, axis=1))


def floor_probabilities(P: np.ndarray, floor: float) -> np.ndarray:
    """Raise entries below ``floor`` to ``floor`` and rescale the rest so rows sum to one."""
    P0 = np.array(P, dtype=float)
    k = P0.shape[1]
    if floor * k >= 1:
        raise KdroError(f"probability floor {floor} too large for {k} bins")
    fixed = np.zeros_like(P0, dtype=bool)
    out = P0
    for _ in range(k):
        # entries pinned at the floor stay pinned; the rest share the remaining mass pro rata
        fixed |= out < floor
        mass = 1.0 - floor * fixed.sum(axis=1, keepdims=True)
        rest = np.where(fixed, 0.0, P0).sum(axis=1, keepdims=True)
        out = np.where(fixed, floor, P0 * mass / np.where(rest > 0, rest, 1.0))
        if not (out < floor).any():
            break
    return out


def discrete_propensity(
    ds: ObservationSet,
    spec: DiscretizationSpec,
    binned,
    floor: float = 0.01,
    coef_clip: float = 30.0,
) -> DiscretePropensityFit:
    """Maximum-likelihood multinomial logit of the bin index on ``X``."""
    if spec.k < 2:
        raise KdroError("discrete propensity needs k >= 2")
    bins = np.asarray(binned, dtype=int)
    n, d = ds.X.shape
    k = spec.k
    mu = ds.X.mean(axis=0)
    sd = ds.X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = np.column_stack([np.ones(n), (ds.X - mu) / sd])
    onehot = np.zeros((n, k))
    onehot[np.arange(n), bins] = 1.0

    freq = onehot.mean(axis=0)
    ll0 = float(np.sum(onehot @ np.log(np.where(freq > 0, freq, 1.0))))

    def unpack(theta):
        return np.vstack([np.zeros(d + 1), theta.reshape(k - 1, d + 1)])

    def nll(theta):
        C = unpack(theta)
        logp = log_softmax(Z @ C.T, axis=1)
        grad = (np.exp(logp) - onehot).T @ Z
        return -float(np.sum(onehot * logp)), grad[1:].ravel()

    theta0 = np.zeros((k - 1) * (d + 1))
    theta0.reshape(k - 1, d + 1)[:, 0] = np.log(np.maximum(freq[1:], 1e-12) / max(freq[0], 1e-12))
    opts = {"maxiter": 2000, "gtol": 1e-8, "ftol": 1e-15}
    res = optimize.minimize(nll, theta0, jac=True, method="L-BFGS-B", options=opts)
    theta = res.x
    separated = bool(np.max(np.abs(theta)) > coef_clip)
    if separated:
        warnings.warn(f"multinomial logit coefficients exceed {coef_clip}; clipping", SeparationDetected)
        theta = np.clip(theta, -coef_clip, coef_clip)
    C = unpack(theta)
    raw = np.exp(log_softmax(Z @ C.T, axis=1))
    P = floor_probabilities(raw, floor)
    active = bool(np.any(raw < floor))
    if active:
        logger.info("propensity floor %.3g active on %d entries", floor, int(np.sum(raw < floor)))
    ll = float(np.sum(onehot * np.log(np.maximum(raw, 1e-300))))
    return DiscretePropensityFit(P, P[np.arange(n), bins], C, ll, ll0, separated, active, mu, sd)


# ----------------------------------------------------------------------------
# Discrete policies


@dataclass(frozen=True, eq=False)
class DiscretePolicy:
    """``pi(x) = argmax_j scores[j] . x`` with scores in ``[lo, hi]``; ties pick the lowest bin."""

    scores: np.ndarray
    lo: float = 1.0
    hi: float = 3.0

    def __post_init__(self):
        s = np.array(self.scores, dtype=float)
        if s.ndim == 1:
            s = s.reshape(-1, 1)
        object.__setattr__(self, "scores", np.clip(s, self.lo, self.hi))

    @property
    def k(self) -> int:
        return self.scores.shape[0]

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        return np.argmax(X @ self.scores.T, axis=1)

    def to_dict(self) -> dict:
        return {"kind": "discrete", "scores": self.scores.tolist(), "lo": self.lo, "hi": self.hi}


def indicator_weights(policy: DiscretePolicy, X, binned, observed_probs) -> np.ndarray:
    return (policy.apply(X) == np.asarray(binned)).astype(float) / np.asarray(observed_probs, dtype=float)


def discrete_dro_evaluate(
    ds: ObservationSet,
    spec: DiscretizationSpec,
    binned,
    probs,
    policy: DiscretePolicy,
    eta: float,
    opts: SolverOptions | None = None,
) -> DualSolution:
    """Robust value of a discrete policy; ``probs`` is the observed-bin probability vector
    (or a :class:`DiscretePropensityFit`)."""
    observed = probs.observed if isinstance(probs, DiscretePropensityFit) else probs
    z = indicator_weights(policy, ds.X, binned, observed)
    return solve_alpha(z, ds.Y, eta, opts)


def _candidate_scores(k: int, d: int, lo: float, hi: float, n_random: int, seed: int) -> list:
    cands = []
    for j in range(k):
        s = np.full((k, d), lo)
        s[j] = hi
        cands.append(s)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k, d)))
    cands.extend(rng.uniform(lo, hi, size=(k, d)) for _ in range(n_random))
    return cands


def discrete_dro_learn(
    ds: ObservationSet,
    spec: DiscretizationSpec,
    binned,
    probs,
    eta: float,
    lo: float = 1.0,
    hi: float = 3.0,
    n_random: int = 64,
    seed: int = 0,
    outer_max_iters: int = 50,
    outer_tol: float = 1e-6,
    solver: SolverOptions | None = None,
) -> DiscretePolicy:
    """Alternating robust learning over the per-bin linear score class.

    The policy step searches a fixed candidate set: every "one bin gets the
    top score" vertex of the box plus ``n_random`` uniform draws.
    """
    observed = probs.observed if isinstance(probs, DiscretePropensityFit) else np.asarray(probs, dtype=float)
    bins = np.asarray(binned)
    d = ds.d
    cands = _candidate_scores(spec.k, d, lo, hi, n_random, seed)
    policies = [DiscretePolicy(c, lo, hi) for c in cands]
    Zm = np.array([indicator_weights(p, ds.X, bins, observed) for p in policies])
    totals = Zm.sum(axis=1)
    if not np.any(totals > 0):
        raise DegeneratePolicySearch("no candidate discrete policy matches any observation")
    Y = ds.Y

    def step(alpha: float) -> int:
        if math.isinf(alpha):
            scores = np.where(totals > 0, -(Zm @ Y) / np.where(totals > 0, totals, 1.0), math.inf)
        else:
            with np.errstate(divide="ignore"):
                logz = np.log(Zm)
            scores = np.where(
                totals > 0, logsumexp(logz - Y / alpha, axis=1) - np.log(np.where(totals > 0, totals, 1.0)), math.inf
            )
        best = scores.min()
        return int(np.flatnonzero(scores == best)[0])

    y_span = max(float(Y.max() - Y.min()), 1e-12)
    idx = int(np.flatnonzero(totals > 0)[0])
    sol = solve_alpha(Zm[idx], Y, eta, solver)
    for _ in range(outer_max_iters):
        alpha = sol.alpha_star if sol.alpha_star > 0 else 1e-6 * y_span
        new_idx = step(alpha)
        new_sol = solve_alpha(Zm[new_idx], Y, eta, solver)
        if new_sol.q_value < sol.q_value:
            break
        d_alpha = 0.0 if new_sol.alpha_star == sol.alpha_star else abs(new_sol.alpha_star - sol.alpha_star)
        done = d_alpha < outer_tol and abs(new_sol.q_value - sol.q_value) < outer_tol
        idx, sol = new_idx, new_sol
        if done:
            break
    return policies[idx]
