"""Policy learning by alternating a policy step and a dual (alpha) step.

At fixed ``alpha > 0`` the robust objective ``-alpha log W - alpha eta`` is
strictly decreasing in ``W``, so the policy step minimises ``log W`` over the
class; the alpha step then re-solves the dual for the new policy.  Both
steps can only increase the objective, which makes the outer sequence of
dual values non-decreasing.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize

from .dro import DualSolution, SolverOptions, log_sum_exp, solve_alpha
from .errors import AllWeightsZero, DegeneratePolicySearch, KdroError
from .kernels import KernelConfig, scaled_kernel_value
from .model import ObservationSet, PolicySpec, PropensityModel, ScalarMultiple, check_positivity

logger = logging.getLogger(__name__)

GRID = "grid"
COORDINATE = "coordinate"
NELDER_MEAD = "nelder_mead"


@dataclass(frozen=True)
class LearnerOptions:
    """Settings for the policy search and the outer alternation.

    ``optimizer=None`` picks a grid scan for scalar-multiple classes and
    Nelder-Mead with random restarts for linear classes.
    """

    optimizer: Optional[str] = None
    resolution: int = 401
    restarts: int = 5
    nm_maxiter: int = 4000
    nm_xatol: float = 1e-4
    nm_fatol: float = 1e-9
    cd_step: float = 0.25
    cd_sweeps: int = 60
    cd_min_step: float = 1e-4
    outer_max_iters: int = 50
    outer_tol: float = 1e-6
    seed: int = 0
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.resolution < 2:
            raise KdroError("grid resolution must be at least 2")
        if self.outer_max_iters < 1:
            raise KdroError("outer_max_iters must be at least 1")
        if self.restarts < 1:
            raise KdroError("restarts must be at least 1")
        if self.optimizer not in (None, GRID, COORDINATE, NELDER_MEAD):
            raise KdroError(f"unknown policy optimizer {self.optimizer!r}")

    def optimizer_for(self, template: PolicySpec) -> str:
        if self.optimizer is not None:
            return self.optimizer
        return GRID if isinstance(template, ScalarMultiple) else NELDER_MEAD


@dataclass
class LearnResult:
    policy: PolicySpec
    solution: DualSolution
    trace: list = field(default_factory=list)
    converged: bool = True

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        n_par = len(self.trace[0][3]) if self.trace else 0
        writer.writerow(["iter", "alpha", "phi"] + [f"param_{j}" for j in range(n_par)])
        for it, alpha, phi, params in self.trace:
            writer.writerow([it, repr(alpha), repr(phi)] + [repr(float(v)) for v in params])
        return buf.getvalue()


class _Objective:
    """Batched policy objective at a fixed ``alpha``.

    ``alpha = inf`` scores policies by minus the normalised IPW mean, which
    is the ``alpha -> inf`` limit of the robust policy step.
    """

    def __init__(self, ds: ObservationSet, prop: PropensityModel, k: KernelConfig, template: PolicySpec, alpha: float):
        self.X = ds.X
        self.A = ds.A
        self.template = template
        self.k = k
        self.inv_dens = 1.0 / check_positivity(prop, ds)
        self.alpha = alpha
        Y = ds.Y
        if math.isinf(alpha):
            self.g = Y
            self.mean_mode = True
        else:
            if not alpha > 0:
                raise KdroError("policy step needs alpha > 0")
            self.y_min = float(Y.min())
            self.g = np.exp(-(Y - self.y_min) / alpha)
            self.mean_mode = False
            self.Y = Y

    def weights(self, params: np.ndarray) -> np.ndarray:
        return scaled_kernel_value(self.k, self.X @ params - self.A) * self.inv_dens

    def _score(self, z: np.ndarray) -> float:
        total = z.sum()
        if not total > 0:
            return math.inf
        num = z @ self.g
        if self.mean_mode:
            return -num / total
        if num > 0:
            return math.log(num) - math.log(total) - self.y_min / self.alpha
        # Every supported tilt factor underflowed; fall back to log-sum-exp.
        pos = z > 0
        lz = np.log(z[pos])
        return log_sum_exp(lz - self.Y[pos] / self.alpha) - log_sum_exp(lz)

    def __call__(self, params) -> float:
        return self._score(self.weights(np.asarray(params, dtype=float)))

    def grid(self, betas: np.ndarray) -> np.ndarray:
        """Scores for a batch of scalar multipliers (d = 1 classes)."""
        x = self.X[:, 0]
        out = np.empty(betas.size)
        # chunk to bound memory at N x chunk
        for s in range(0, betas.size, 64):
            b = betas[s : s + 64]
            Z = scaled_kernel_value(self.k, b[:, None] * x[None, :] - self.A[None, :]) * self.inv_dens
            totals = Z.sum(axis=1)
            nums = Z @ self.g
            for j in range(b.size):
                if not totals[j] > 0:
                    out[s + j] = math.inf
                elif self.mean_mode:
                    out[s + j] = -nums[j] / totals[j]
                elif nums[j] > 0:
                    out[s + j] = math.log(nums[j]) - math.log(totals[j]) - self.y_min / self.alpha
                else:
                    out[s + j] = self._score(Z[j])
        return out


UNSUPPORTED_PENALTY = 1e300


def _restart_rng(opts: LearnerOptions, call_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(opts.seed, spawn_key=(call_index,)))


def _pick(cands: list) -> tuple:
    """Best ``(score, params)``; ties go to the smallest sup-norm, then lexicographic."""
    finite = [c for c in cands if math.isfinite(c[0])]
    if not finite:
        raise DegeneratePolicySearch("every candidate policy has all-zero kernel weights")
    best = min(c[0] for c in finite)
    tied = [c for c in finite if c[0] == best]
    return min(tied, key=lambda c: (float(np.max(np.abs(c[1]))), tuple(c[1])))


def _grid_step(obj: _Objective, p0: PolicySpec, opts: LearnerOptions) -> np.ndarray:
    lo, hi = float(p0.lower[0]), float(p0.upper[0])
    betas = np.linspace(lo, hi, opts.resolution)
    scores = obj.grid(betas)
    return _pick([(float(s), np.array([b])) for s, b in zip(scores, betas)])[1]


def _nelder_mead_step(obj: _Objective, p0: PolicySpec, opts: LearnerOptions, call_index: int) -> np.ndarray:
    lo, hi = p0.lower, p0.upper
    rng = _restart_rng(opts, call_index)
    starts = [p0.params] + [rng.uniform(lo, hi) for _ in range(opts.restarts - 1)]
    bounds = list(zip(lo, hi))
    cands = []

    def bounded(x):
        # unsupported policies score +inf; a finite stand-in keeps the simplex arithmetic NaN-free
        v = obj(x)
        return v if math.isfinite(v) else UNSUPPORTED_PENALTY

    for x0 in starts:
        res = optimize.minimize(
            bounded,
            x0,
            method="Nelder-Mead",
            bounds=bounds,
            options={"maxiter": opts.nm_maxiter, "xatol": opts.nm_xatol, "fatol": opts.nm_fatol, "adaptive": True},
        )
        x = np.clip(res.x, lo, hi)
        cands.append((obj(x), x))
    return _pick(cands)[1]


def _coordinate_step(obj: _Objective, p0: PolicySpec, opts: LearnerOptions) -> np.ndarray:
    lo, hi = p0.lower, p0.upper
    x = p0.params.astype(float).copy()
    fx = obj(x)
    step = opts.cd_step * (hi - lo)
    for _ in range(opts.cd_sweeps):
        improved = False
        for j in range(x.size):
            for sgn in (1.0, -1.0):
                y = x.copy()
                y[j] = np.clip(y[j] + sgn * step[j], lo[j], hi[j])
                fy = obj(y)
                if fy < fx:
                    x, fx, improved = y, fy, True
                    break
        if not improved:
            step = step * 0.5
            if np.all(step < opts.cd_min_step):
                break
    return x


def policy_step(
    ds: ObservationSet,
    prop: PropensityModel,
    k: KernelConfig,
    alpha: float,
    p0: PolicySpec,
    opts: LearnerOptions | None = None,
    call_index: int = 0,
) -> PolicySpec:
    """Minimise ``log W_hat(pi, alpha)`` over the class of ``p0``.

    The returned policy never scores worse than ``p0``.
    """
    opts = opts or LearnerOptions()
    obj = _Objective(ds, prop, k, p0, alpha)
    method = opts.optimizer_for(p0)
    if method == GRID:
        if p0.d != 1:
            raise KdroError("grid policy search needs a one-parameter class")
        x = _grid_step(obj, p0, opts)
    elif method == NELDER_MEAD:
        x = _nelder_mead_step(obj, p0, opts, call_index)
    else:
        x = _coordinate_step(obj, p0, opts)
    f0, fx = obj(p0.params), obj(x)
    if not math.isfinite(fx) and not math.isfinite(f0):
        raise DegeneratePolicySearch("no candidate policy has data support")
    if fx > f0:
        return p0
    return p0.with_params(x)


def _dual(ds, prop, k, p, eta, opts: LearnerOptions) -> DualSolution:
    z = scaled_kernel_value(k, p.apply(ds.X) - ds.A) / check_positivity(prop, ds)
    return solve_alpha(z, ds.Y, eta, opts.solver)


def learn_policy(
    ds: ObservationSet,
    prop: PropensityModel,
    k: KernelConfig,
    eta: float,
    template: PolicySpec,
    opts: LearnerOptions | None = None,
) -> LearnResult:
    """Alternate policy and alpha steps from ``template`` until both settle.

    Stops when successive ``alpha`` and dual values both change by less than
    ``outer_tol`` or after ``outer_max_iters`` sweeps; the best policy seen
    is returned with ``converged=False`` in the latter case.
    """
    opts = opts or LearnerOptions()
    policy = template
    p_start = template
    try:
        sol = _dual(ds, prop, k, policy, eta, opts)
    except AllWeightsZero:
        # Unsupported starting point: a first mean-mode step moves to supported ground.
        p_start = policy_step(ds, prop, k, math.inf, template, opts, call_index=10_000)
        policy = p_start
        sol = _dual(ds, prop, k, policy, eta, opts)
    trace = [(0, sol.alpha_star, sol.q_value, tuple(policy.params))]
    best = (sol.q_value, policy, sol)
    y_span = max(float(ds.Y.max() - ds.Y.min()), 1e-12)
    converged = False
    for it in range(1, opts.outer_max_iters + 1):
        alpha = sol.alpha_star if sol.alpha_star > 0 else 1e-6 * y_span
        new_policy = policy_step(ds, prop, k, alpha, policy, opts, call_index=it)
        new_sol = _dual(ds, prop, k, new_policy, eta, opts)
        trace.append((it, new_sol.alpha_star, new_sol.q_value, tuple(new_policy.params)))
        if new_sol.q_value < sol.q_value - 1e-9 and sol.alpha_star > 0:
            logger.warning("outer objective decreased at iteration %d: %.12g -> %.12g", it, sol.q_value, new_sol.q_value)
        if new_sol.q_value > best[0]:
            best = (new_sol.q_value, new_policy, new_sol)
        d_alpha = 0.0 if new_sol.alpha_star == sol.alpha_star else abs(new_sol.alpha_star - sol.alpha_star)
        d_phi = abs(new_sol.q_value - sol.q_value)
        policy, sol = new_policy, new_sol
        if d_alpha < opts.outer_tol and d_phi < opts.outer_tol:
            converged = True
            break
    if converged:
        return LearnResult(policy, sol, trace, True)
    logger.warning("policy learning hit outer_max_iters=%d; returning best iterate", opts.outer_max_iters)
    return LearnResult(best[1], best[2], trace, False)


def learn_nonrobust(
    ds: ObservationSet,
    prop: PropensityModel,
    k: KernelConfig,
    template: PolicySpec,
    opts: LearnerOptions | None = None,
) -> PolicySpec:
    """Maximise the self-normalised kernel IPW mean over the class."""
    return policy_step(ds, prop, k, math.inf, template, opts or LearnerOptions())


def policy_value(ds, prop, k, p, eta, opts: LearnerOptions | None = None) -> DualSolution:
    return _dual(ds, prop, k, p, eta, opts or LearnerOptions())
