"""Data-generating processes, counterfactual oracles and evaluation metrics.

Three designs are provided:

* ``simple_uniform``: ``X ~ U(0, 1)``, ``A | X ~ U(X, X + 1)``,
  ``Y = 5 + X / A + e`` with ``e ~ U(0, 1)``.
* ``highdim_gaussian``: ten ``U(-0.2, 0.2)`` covariates, Gaussian logging
  policy and a treatment-covariate interaction outcome, with a random
  sparsity mask on the coefficients.
* ``warfarin``: user-supplied covariates with a synthetic Gaussian treatment
  and interaction outcome.
"""
from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from .errors import CalibrationFailed, DataError, KdroError, MissingAgeColumn, MissingDataFile, QuadratureBudgetExceeded
from .dro import log_sum_exp
from .model import GaussianLinear, ObservationSet, PolicySpec, PropensityModel, UniformShift

logger = logging.getLogger(__name__)


class DgpKind(str, enum.Enum):
    SIMPLE_UNIFORM = "simple_uniform"
    HIGHDIM_GAUSSIAN = "highdim_gaussian"
    WARFARIN = "warfarin"


@dataclass(frozen=True)
class DgpSpec:
    """Declarative description of a data-generating process.

    ``seed`` fixes the random parts of the design itself (the sparsity mask
    of the high-dimensional design); sampling uses its own generator.
    """

    kind: DgpKind = DgpKind.SIMPLE_UNIFORM
    seed: int = 0
    spread: float = 0.1
    spread_is_std: bool = False
    # high-dimensional design
    d: int = 10
    x_half_width: float = 0.2
    beta3: float = 1.0
    n_zero_beta1: int = 3
    n_zero_beta2: int = 3
    n_zero_theta: int = 2
    policy_bound: float = 2.0
    # warfarin design
    warfarin_theta: float = 0.1
    warfarin_beta1: float = 0.2
    warfarin_beta2: float = 0.1
    warfarin_intercept: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", DgpKind(self.kind))


@dataclass(frozen=True, eq=False)
class CounterfactualOracle:
    """Potential-outcome map ``y(x, a)`` plus a fresh-noise sampler.

    ``mean_fn(X, a)`` returns ``E[Y(a) | X]``; ``noise_fn(rng, n)`` returns
    centred noise.  Sampled outcomes are clipped to ``[0, outcome_bound]``.
    """

    mean_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    noise_fn: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None
    outcome_bound: float = math.inf

    def expected(self, X, a) -> np.ndarray:
        return self.mean_fn(np.asarray(X, dtype=float), np.asarray(a, dtype=float))

    def sample(self, X, a, rng: np.random.Generator) -> np.ndarray:
        y = self.expected(X, a)
        if self.noise_fn is not None:
            y = y + self.noise_fn(rng, y.shape[0])
        return np.clip(y, 0.0, self.outcome_bound)


def constant_oracle(c: float) -> CounterfactualOracle:
    return CounterfactualOracle(lambda X, a: np.full(np.shape(a), float(c)), None, max(float(c), 0.0))


@dataclass(frozen=True, eq=False)
class Dgp:
    """A fully instantiated design: propensity, oracle and covariate sampler."""

    spec: DgpSpec
    propensity: PropensityModel
    oracle: CounterfactualOracle
    sample_covariates: Callable[[np.random.Generator, int], np.ndarray]
    coefficients: dict = field(default_factory=dict)

    @property
    def outcome_bound(self) -> float:
        return self.oracle.outcome_bound

    def sample(self, n: int, rng: np.random.Generator) -> ObservationSet:
        if n < 1:
            raise KdroError("sample size must be at least 1")
        X = self.sample_covariates(rng, n)
        A = self.propensity.sample(X, rng)
        raw = self.oracle.expected(X, A)
        if self.oracle.noise_fn is not None:
            raw = raw + self.oracle.noise_fn(rng, n)
        clipped = np.clip(raw, 0.0, self.outcome_bound)
        n_cut = int(np.count_nonzero(clipped != raw))
        if n_cut:
            logger.info("truncated %d of %d outcomes to [0, %.4g]", n_cut, n, self.outcome_bound)
        return ObservationSet(X, A, clipped, self.outcome_bound)


def _simple_uniform(spec: DgpSpec) -> Dgp:
    def mean_fn(X, a):
        x = X[:, 0] if X.ndim == 2 else X
        safe = np.where(a != 0, a, 1.0)
        return 5.5 + np.where(a != 0, x / safe, 0.0)

    def noise_fn(rng, n):
        return rng.random(n) - 0.5

    # X / A <= 1 on the logging support; counterfactual treatments beta*X >= X keep it there too.
    oracle = CounterfactualOracle(mean_fn, noise_fn, 7.0)
    prop = UniformShift(0.0, (1.0,), 1.0, (1.0,), positivity_floor=1.0)
    return Dgp(spec, prop, oracle, lambda rng, n: rng.random((n, 1)))


def highdim_coefficients(spec: DgpSpec) -> dict:
    """Coefficient vectors with the random sparsity mask drawn from ``spec.seed``."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0x5EED,)))
    d = spec.d
    coefs = {}
    for name, n_zero in (("theta", spec.n_zero_theta), ("beta1", spec.n_zero_beta1), ("beta2", spec.n_zero_beta2)):
        v = np.ones(d)
        v[rng.choice(d, size=n_zero, replace=False)] = 0.0
        coefs[name] = v
    return coefs


def _highdim_gaussian(spec: DgpSpec) -> Dgp:
    d, hw = spec.d, spec.x_half_width
    if d < 3:
        raise KdroError("high-dimensional design needs d >= 3")
    coefs = highdim_coefficients(spec)
    theta, beta1, beta2 = coefs["theta"], coefs["beta1"], coefs["beta2"]
    shift = np.zeros(d)
    shift[:3] = (1.0, 2.0, -3.0)
    prop = GaussianLinear(theta, shift, 0.0, spec.spread, spec.spread_is_std)
    sd = math.sqrt(prop.variance)
    # Largest treatment reachable by the logging policy (6 sd) or by the policy class.
    a_max = max(hw * float(np.abs(theta + shift).sum()) + 6 * sd, spec.policy_bound * hw * d)
    bound = 5.0 + hw * float(np.abs(beta1).sum()) + (hw * float(np.abs(beta2).sum()) + abs(spec.beta3)) * a_max

    def mean_fn(X, a):
        return 5.0 + X @ beta1 + (X @ beta2) * a + spec.beta3 * a

    oracle = CounterfactualOracle(mean_fn, None, bound)
    return Dgp(spec, prop, oracle, lambda rng, n: rng.uniform(-hw, hw, size=(n, d)), coefs)


def _warfarin(spec: DgpSpec, covariates: np.ndarray) -> Dgp:
    X_all = np.asarray(covariates, dtype=float)
    p = X_all.shape[1]
    theta = np.full(p, spec.warfarin_theta)
    beta1 = np.full(p, spec.warfarin_beta1)
    beta2 = np.full(p, spec.warfarin_beta2)
    prop = GaussianLinear(theta, np.zeros(p), spec.warfarin_intercept, spec.spread, spec.spread_is_std)
    sd = math.sqrt(prop.variance)
    l1 = np.abs(X_all).sum(axis=1).max()
    a_max = max(abs(spec.warfarin_intercept) + spec.warfarin_theta * l1 + 6 * sd, spec.policy_bound * l1)
    bound = 5.0 + spec.warfarin_beta1 * l1 + spec.warfarin_beta2 * l1 * a_max + 1.0

    def mean_fn(X, a):
        return 5.5 + X @ beta1 + (X @ beta2) * a

    def noise_fn(rng, n):
        return rng.random(n) - 0.5

    oracle = CounterfactualOracle(mean_fn, noise_fn, bound)
    coefs = {"theta": theta, "beta1": beta1, "beta2": beta2}

    def no_sampler(rng, n):
        raise KdroError("warfarin covariates are fixed; use sample_at")

    return Dgp(spec, prop, oracle, no_sampler, coefs)


def build_dgp(spec: DgpSpec, covariates: Optional[np.ndarray] = None) -> Dgp:
    if spec.kind is DgpKind.SIMPLE_UNIFORM:
        return _simple_uniform(spec)
    if spec.kind is DgpKind.HIGHDIM_GAUSSIAN:
        return _highdim_gaussian(spec)
    if covariates is None:
        raise MissingDataFile("the warfarin design needs a covariate matrix")
    return _warfarin(spec, covariates)


def sample_at(dgp: Dgp, X: np.ndarray, rng: np.random.Generator) -> ObservationSet:
    """Draw treatments and outcomes for fixed covariate rows."""
    X = np.asarray(X, dtype=float)
    A = dgp.propensity.sample(X, rng)
    Y = dgp.oracle.sample(X, A, rng)
    return ObservationSet(X, A, Y, dgp.outcome_bound)


def generate(spec: DgpSpec, n: int, covariates: Optional[np.ndarray] = None):
    """Sample ``n`` rows from the design seeded by ``spec.seed``.

    Returns ``(dataset, propensity, oracle)``.  For the warfarin design the
    first ``n`` covariate rows are used.
    """
    dgp = build_dgp(spec, covariates)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1,)))
    if spec.kind is DgpKind.WARFARIN:
        ds = sample_at(dgp, np.asarray(covariates, dtype=float)[:n], rng)
    else:
        ds = dgp.sample(n, rng)
    return ds, dgp.propensity, dgp.oracle


# ----------------------------------------------------------------------------
# Oracle for the optimal robust value on the simple design


def _kl_dual_value(values: np.ndarray, log_weights: np.ndarray, eta: float) -> float:
    """``sup_{alpha >= 0} -alpha log E exp(-V/alpha) - alpha eta`` for a discrete law.

    A bounded scalar search over ``log alpha``, kept separate from the
    Newton solver so the two routes stay independent.
    """
    if eta == 0:
        return float(np.exp(log_weights) @ values)
    vmin = float(values.min())
    shifted = values - vmin
    # phi is concave in alpha, hence unimodal in log(alpha): a coarse scan
    # followed by bounded Brent refinement finds the global maximum.

    def neg_phi(log_alpha):
        alpha = math.exp(log_alpha)
        return alpha * logsumexp(log_weights - shifted / alpha) + alpha * eta

    grid = np.linspace(-12.0, 8.0, 41)
    vals = np.array([neg_phi(t) for t in grid])
    i = int(vals.argmin())
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    res = optimize.minimize_scalar(neg_phi, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    best = min(float(res.fun), float(vals[i]))
    return vmin - best if -best > 0 else vmin


def _legendre01(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def oracle_q_dro(spec: DgpSpec, beta: float, eta: float, nodes: int = 200, max_nodes: int = 4000) -> float:
    """Population robust value of ``pi(x) = beta x`` on the simple design.

    Tensor Gauss-Legendre quadrature over ``(X, e)`` in ``[0, 1]^2``.
    """
    if DgpKind(spec.kind) is not DgpKind.SIMPLE_UNIFORM:
        raise KdroError("the robust-value oracle is only available for the simple design")
    if nodes > max_nodes:
        raise QuadratureBudgetExceeded(f"{nodes} nodes per axis exceeds budget {max_nodes}")
    dgp = _simple_uniform(spec)
    xs, wx = _legendre01(nodes)
    es, we = _legendre01(nodes)
    X = np.repeat(xs, nodes)
    E = np.tile(es, nodes)
    W = np.repeat(wx, nodes) * np.tile(we, nodes)
    if abs(W.sum() - 1.0) > 1e-12:
        raise QuadratureBudgetExceeded("quadrature weights do not integrate to one")
    a = beta * X
    values = dgp.oracle.expected(X.reshape(-1, 1), a) + (E - 0.5)
    return _kl_dual_value(values, np.log(W), float(eta))


def oracle_q_star(spec: DgpSpec, lo: float = 1.0, hi: float = 3.0, eta: float = 0.05, nodes: int = 200) -> float:
    """``max_{beta in [lo, hi]}`` of :func:`oracle_q_dro` by grid scan plus refinement."""
    betas = np.linspace(lo, hi, 21)
    vals = np.array([oracle_q_dro(spec, b, eta, nodes) for b in betas])
    i = int(vals.argmax())
    a, b = betas[max(i - 1, 0)], betas[min(i + 1, betas.size - 1)]
    res = optimize.minimize_scalar(
        lambda t: -oracle_q_dro(spec, t, eta, nodes), bounds=(a, b), method="bounded", options={"xatol": 1e-8}
    )
    return max(float(vals[i]), -float(res.fun))


# ----------------------------------------------------------------------------
# KL-ball perturbations and counterfactual metrics


def empirical_kl(w: np.ndarray) -> float:
    """``KL(w || uniform) = sum w log(N w)``."""
    w = np.asarray(w, dtype=float)
    pos = w > 0
    return float(np.sum(w[pos] * np.log(w.size * w[pos])))


def tilt_weights(direction: np.ndarray, eta: float) -> np.ndarray:
    """Exponential tilt ``w ~ exp(lam * g)`` with ``KL(w || uniform) = eta``."""
    g = np.asarray(direction, dtype=float)
    n = g.size
    if eta == 0:
        return np.full(n, 1.0 / n)

    def kl(lam):
        logw = lam * g - log_sum_exp(lam * g)
        return float(np.sum(np.exp(logw) * (logw + math.log(n))))

    hi = 1.0
    while kl(hi) < eta:
        hi *= 2.0
        if hi > 1e8:
            raise CalibrationFailed(f"KL radius {eta} unreachable with {n} rows (max log N = {math.log(n):.3f})")
    lam = optimize.brentq(lambda t: kl(t) - eta, 0.0, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)
    logw = lam * g - log_sum_exp(lam * g)
    w = np.exp(logw)
    if abs(empirical_kl(w) - eta) > 1e-6:
        raise CalibrationFailed(f"tilt calibration missed target {eta}")
    return w


def perturb_kl(ds: ObservationSet, eta_test: float, count: int, seed: int, return_weights: bool = False):
    """Importance-resampled copies of ``ds`` under calibrated random tilts.

    Each copy uses its own child stream of ``seed``; ``eta_test = 0``
    returns exact copies.
    """
    if eta_test < 0 or count < 1:
        raise KdroError("perturb_kl needs eta_test >= 0 and count >= 1")
    children = np.random.SeedSequence(seed).spawn(count)
    sets, weights = [], []
    for child in children:
        rng = np.random.default_rng(child)
        if eta_test == 0:
            sets.append(ds.subset(np.arange(ds.n)))
            weights.append(np.full(ds.n, 1.0 / ds.n))
            continue
        g = rng.standard_normal(ds.n)
        g /= np.linalg.norm(g)
        w = tilt_weights(g, eta_test)
        idx = rng.choice(ds.n, size=ds.n, replace=True, p=w)
        sets.append(ds.subset(idx))
        weights.append(w)
    return (sets, weights) if return_weights else sets


def q_pert(policy: PolicySpec, oracle: CounterfactualOracle, perturbed) -> float:
    """Minimum over perturbed sets of the mean counterfactual outcome (noise-free)."""
    if len(perturbed) < 1:
        raise KdroError("q_pert needs at least one perturbed set")
    means = [
        float(np.mean(np.clip(oracle.expected(s.X, policy.apply(s.X)), 0.0, oracle.outcome_bound)))
        for s in perturbed
    ]
    return min(means)


def q_mean(policy: PolicySpec, oracle: CounterfactualOracle, test: ObservationSet, rng: np.random.Generator) -> float:
    """Sample mean of potential outcomes at the policy's treatments, fresh noise."""
    return float(np.mean(oracle.sample(test.X, policy.apply(test.X), rng)))


# ----------------------------------------------------------------------------
# Warfarin covariates


@dataclass(frozen=True, eq=False)
class WarfarinCovariates:
    age: np.ndarray
    dose: np.ndarray
    X: np.ndarray


def load_warfarin_csv(path, standardize: bool = True) -> WarfarinCovariates:
    """Read the prepared covariate file (``age, dose, x_0..x_40``).

    Covariates are z-scored over all rows unless ``standardize`` is false;
    constant columns are left centred.
    """
    path = Path(path)
    if not path.exists():
        raise MissingDataFile(f"warfarin covariate file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [r for r in reader if r]
    if "age" not in header:
        raise MissingAgeColumn(f"no 'age' column in {path}")
    cols = {h: j for j, h in enumerate(header)}
    xcols = sorted((h for h in header if h.startswith("x_")), key=lambda h: int(h[2:]))
    if not xcols:
        raise DataError(f"no covariate columns (x_0, x_1, ...) in {path}")
    try:
        data = np.array(rows, dtype=float)
    except ValueError as exc:
        raise DataError(f"non-numeric entry in {path}: {exc}") from None
    X = data[:, [cols[h] for h in xcols]]
    if standardize:
        sd = X.std(axis=0)
        X = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    dose = data[:, cols["dose"]] if "dose" in cols else np.full(len(rows), np.nan)
    return WarfarinCovariates(data[:, cols["age"]], dose, X)


def warfarin_split(age) -> tuple[np.ndarray, np.ndarray]:
    """Train on ages 10-69, test on ages 70 and above."""
    if age is None:
        raise MissingAgeColumn("age column required for the warfarin split")
    age = np.asarray(age, dtype=float)
    train = np.flatnonzero((age >= 10) & (age <= 69))
    test = np.flatnonzero(age >= 70)
    return train, test
