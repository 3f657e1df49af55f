"""Kernel-smoothed IPW estimators and the KL-robust dual.

For a policy ``pi`` the kernel weights are
``z_i = K_h(pi(X_i) - A_i) / f0(A_i | X_i)`` and the robust value is

    Q = max_{alpha >= 0}  -alpha * log W(alpha) - alpha * eta,
    W(alpha) = sum_i z_i exp(-Y_i / alpha) / sum_i z_i.

``phi(alpha)`` is concave, so the maximiser is the unique root of
``phi'(alpha) = -eta - log W - E_q[Y] / alpha`` where ``q`` is the
exponentially tilted weight vector ``q_i ~ z_i exp(-Y_i / alpha)``; the
second derivative is ``-Var_q[Y] / alpha**3``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import AllWeightsZero, KdroError
from .kernels import KernelConfig, scaled_kernel_value
from .model import ObservationSet, PolicySpec, PropensityModel, check_positivity

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AmbiguityConfig:
    eta: float = 0.05

    def __post_init__(self):
        if not (math.isfinite(self.eta) and self.eta >= 0):
            raise KdroError(f"KL radius must be non-negative, got {self.eta!r}")


@dataclass(frozen=True)
class SolverOptions:
    tol_g: float = 1e-9
    tol_alpha: float = 1e-10
    max_iter: int = 200
    alpha_init: float = 1.0
    alpha_max: float = 1e12


@dataclass(frozen=True)
class DualSolution:
    """Maximiser of the empirical dual for one (policy, eta, h) triple.

    ``alpha_star`` is 0 when the supremum is attained at the boundary and
    ``inf`` for ``eta == 0`` (plain normalised IPW mean).
    """

    alpha_star: float
    q_value: float
    iterations: int
    converged: bool
    w_hat_at_alpha: float
    s_n: float
    boundary: bool = False

    def to_record(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# Estimator pieces


def weight_vector(ds: ObservationSet, prop: PropensityModel, p: PolicySpec, k: KernelConfig) -> np.ndarray:
    """``z_i = K_h(pi(X_i) - A_i) / f0(A_i | X_i)``."""
    dens = check_positivity(prop, ds)
    return scaled_kernel_value(k, p.apply(ds.X) - ds.A) / dens


def s_n(weights) -> float:
    z = np.asarray(weights, dtype=float)
    total = z.mean()
    if not total > 0:
        raise AllWeightsZero("all kernel weights are zero; the policy has no data support")
    return float(total)


def w_bar(weights, Y, alpha: float) -> float:
    z = np.asarray(weights, dtype=float)
    return float(np.mean(z * np.exp(-np.asarray(Y, dtype=float) / alpha)))


def log_sum_exp(v: np.ndarray) -> float:
    """``log sum exp(v)`` for a non-empty 1-D array; avoids scipy's per-call dispatch cost."""
    m = float(v.max())
    if not math.isfinite(m):
        return m
    return m + math.log(float(np.exp(v - m).sum()))


def log_w_hat(weights, Y, alpha: float) -> float:
    """``log W_hat`` via max-subtracted log-sum-exp over the supported rows."""
    z = np.asarray(weights, dtype=float)
    Y = np.asarray(Y, dtype=float)
    pos = z > 0
    if not np.any(pos):
        raise AllWeightsZero("all kernel weights are zero; the policy has no data support")
    logz = np.log(z[pos])
    return log_sum_exp(logz - Y[pos] / alpha) - log_sum_exp(logz)


def w_hat(weights, Y, alpha: float) -> float:
    """Normalised estimator ``W_bar / S_N``."""
    return math.exp(log_w_hat(weights, Y, alpha))


class _Supported:
    """Normalised weights on the supported rows, outcomes shifted to start at 0."""

    __slots__ = ("p", "y", "y_min", "mean", "mass_at_min")

    def __init__(self, weights, Y):
        z = np.asarray(weights, dtype=float)
        Y = np.asarray(Y, dtype=float)
        pos = z > 0
        if not np.any(pos):
            raise AllWeightsZero("all kernel weights are zero; the policy has no data support")
        z = z[pos]
        self.p = z / z.sum()
        self.y_min = float(Y[pos].min())
        self.y = Y[pos] - self.y_min
        self.mean = self.y_min + float(self.p @ self.y)
        self.mass_at_min = float(self.p[self.y == 0].sum())

    def log_s(self, alpha: float) -> float:
        # sum_i p_i exp(-y_i / alpha) >= mass_at_min > 0, so no underflow of the total.
        return float(math.log(self.p @ np.exp(-self.y / alpha)))

    def terms(self, alpha: float):
        """Return ``(log S, E_q[y], Var_q[y])`` at ``alpha``."""
        logw = np.log(self.p) - self.y / alpha
        lse = log_sum_exp(logw)
        q = np.exp(logw - lse)
        m = float(q @ self.y)
        v = float(q @ (self.y - m) ** 2)
        return float(lse), m, v

    def phi(self, alpha: float, eta: float) -> float:
        if alpha == 0:
            return self.y_min
        if math.isinf(alpha):
            return self.mean if eta == 0 else -math.inf
        return self.y_min - alpha * self.log_s(alpha) - alpha * eta

    def grad(self, alpha: float, eta: float) -> float:
        log_s, m, _ = self.terms(alpha)
        return -eta - log_s - m / alpha

    def hess(self, alpha: float) -> float:
        _, _, v = self.terms(alpha)
        return -v / alpha**3


def _check_alpha(alpha: float):
    if not alpha > 0:
        raise KdroError(f"alpha must be positive, got {alpha!r}")


def dual_objective(weights, Y, alpha: float, eta: float) -> float:
    """``phi(alpha) = -alpha log W_hat - alpha eta``; ``alpha = 0`` gives the limit ``min Y``."""
    sup = _Supported(weights, Y)
    if alpha < 0:
        raise KdroError(f"alpha must be non-negative, got {alpha!r}")
    return sup.phi(float(alpha), float(eta))


def dual_gradient(weights, Y, alpha: float, eta: float) -> float:
    _check_alpha(alpha)
    sup = _Supported(weights, Y)
    # Shifting Y by y_min leaves phi' unchanged: the shift adds y_min/alpha to
    # -log W and subtracts y_min/alpha from -E_q[Y]/alpha.
    return sup.grad(float(alpha), float(eta))


def dual_hessian(weights, Y, alpha: float, eta: float) -> float:
    _check_alpha(alpha)
    return _Supported(weights, Y).hess(float(alpha))


# ----------------------------------------------------------------------------
# Safeguarded Newton solve


def solve_alpha(weights, Y, eta: float, opts: SolverOptions | None = None) -> DualSolution:
    """Maximise the empirical dual over ``alpha >= 0``.

    Newton steps on ``phi'`` are accepted only while they stay inside a sign
    bracket ``[lo, hi]`` with ``phi'(lo) > 0 > phi'(hi)``; otherwise the
    bracket is bisected (geometrically when it spans more than a factor 4).
    """
    opts = opts or SolverOptions()
    eta = AmbiguityConfig(float(eta)).eta
    sup = _Supported(weights, Y)
    sn = s_n(weights)

    if eta == 0:
        return DualSolution(math.inf, sup.mean, 0, True, 1.0, sn)

    def boundary(iterations: int) -> DualSolution:
        return DualSolution(0.0, sup.y_min, iterations, True, 0.0, sn, boundary=True)

    # phi'(0+) = -eta - log(mass at the minimum outcome).
    if sup.mass_at_min >= 1.0 or -eta - math.log(sup.mass_at_min) <= 0:
        return boundary(0)

    scale = max(float(sup.y.max()), 1e-300)
    alpha_min = 1e-14 * scale
    alpha = float(opts.alpha_init)
    g = sup.grad(alpha, eta)
    n_iter = 1
    lo, hi = 0.0, math.inf
    if g > 0:
        while g > 0:
            lo = alpha
            if alpha >= opts.alpha_max:
                logger.warning("dual maximiser exceeds alpha_max=%g", opts.alpha_max)
                w_at = math.exp(sup.log_s(alpha) - sup.y_min / alpha)
                return DualSolution(alpha, sup.phi(alpha, eta), n_iter, False, w_at, sn)
            alpha = min(2.0 * alpha, opts.alpha_max)
            g = sup.grad(alpha, eta)
            n_iter += 1
        hi = alpha
    elif g < 0:
        hi = alpha
        while True:
            alpha *= 0.5
            g = sup.grad(alpha, eta)
            n_iter += 1
            if g >= 0:
                lo = alpha
                break
            hi = alpha
            if alpha < alpha_min:
                return boundary(n_iter)

    converged = g == 0
    while not converged and n_iter < opts.max_iter:
        h = sup.hess(alpha)
        step = -g / h if h < 0 else math.nan
        cand = alpha + step
        if not (lo < cand < hi):
            cand = math.sqrt(lo * hi) if hi > 4 * lo and lo > 0 else 0.5 * (lo + hi)
        step = cand - alpha
        alpha = cand
        g = sup.grad(alpha, eta)
        n_iter += 1
        if g > 0:
            lo = alpha
        else:
            hi = alpha
        if abs(g) < opts.tol_g or abs(step) < opts.tol_alpha * max(1.0, alpha) or hi - lo < opts.tol_alpha * max(1.0, alpha):
            converged = True

    if not converged:
        logger.warning("alpha solve stopped after %d iterations (|grad|=%.3g)", n_iter, abs(g))

    value = sup.phi(alpha, eta)
    if value <= sup.y_min:
        return boundary(n_iter)
    # Round-off guard: the dual value never exceeds the weighted mean.
    value = min(value, sup.mean)
    w_at = math.exp(sup.log_s(alpha) - sup.y_min / alpha)
    return DualSolution(alpha, value, n_iter, converged, w_at, sn)


def evaluate_policy(
    ds: ObservationSet,
    prop: PropensityModel,
    p: PolicySpec,
    k: KernelConfig,
    eta: float,
    opts: SolverOptions | None = None,
) -> DualSolution:
    """Robust value estimate of a fixed policy on logged data."""
    z = weight_vector(ds, prop, p, k)
    return solve_alpha(z, ds.Y, eta, opts)


def normalized_ipw_value(weights, Y) -> float:
    """Self-normalised kernel IPW mean ``sum z Y / sum z``."""
    return _Supported(weights, Y).mean
