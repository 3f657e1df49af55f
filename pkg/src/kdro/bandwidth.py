"""Bandwidth selection for the kernel-smoothed robust estimator.

The asymptotic MSE of the normalised estimator at bandwidth ``h`` is
``B^2 h^4 + V / (N h)``, minimised by ``h* = (V / (4 N B^2))^(1/5)``.
``B`` and ``V`` are estimated by plug-in:

* ``B = (m2 / 2) * E[d^2/da^2 E[g(Y) | A = a, X]]`` at ``a = pi(X)``, where
  the second derivative is a central difference of the unnormalised kernel
  IPW mean evaluated at the policy shifted by ``+-Delta`` (``Delta`` = pilot
  bandwidth).
* ``V = r * ubar * (G2 - 2 G1 W + W^2)`` with ``u = 1 / f0(pi(X) | X)``,
  ``ubar`` its sample mean, ``G1``/``G2`` the ``z*u``-weighted means of
  ``g`` and ``g^2`` and ``W`` the ``z``-weighted mean of ``g``.

Here ``g(Y) = exp(-Y / alpha)`` at the pilot dual solution.  When the pilot
radius is zero (``alpha = inf``) the first-order term ``g(Y) = Y`` is used,
which gives the same ``h*`` as the ``alpha -> inf`` limit.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dro import SolverOptions, evaluate_policy
from .errors import AllWeightsZero, DegenerateResiduals, KdroError, NonPositiveVariance, NumericalError
from .kernels import KernelConfig, KernelFamily, kernel_moments, scaled_kernel_value
from .model import ObservationSet, PolicySpec, PropensityModel, check_positivity

logger = logging.getLogger(__name__)

H_MIN = 1e-4


@dataclass(frozen=True)
class BandwidthChoice:
    h: float
    rule: str
    pilot_bandwidth: float
    b_hat: float = math.nan
    v_hat: float = math.nan
    alpha_used: float = math.nan
    h_unsquared: float = math.nan
    clamped: bool = False
    note: str = ""


def _integrand(Y: np.ndarray, alpha: float, shift: float) -> np.ndarray:
    if math.isinf(alpha):
        return Y - shift
    if not alpha > 0:
        raise KdroError("plug-in estimates need alpha > 0")
    return np.exp(-(Y - shift) / alpha)


def estimate_bias(
    ds: ObservationSet,
    prop: PropensityModel,
    p: PolicySpec,
    alpha: float,
    pilot: KernelConfig,
    outcome_shift: float = 0.0,
) -> float:
    """Plug-in bias coefficient ``B_hat``.

    ``outcome_shift`` evaluates the estimate for ``Y - shift``: the result is
    then ``exp(shift / alpha)`` times the unshifted one, which keeps small
    ``alpha`` from underflowing.
    """
    dens = check_positivity(prop, ds)
    g = _integrand(ds.Y, alpha, outcome_shift)
    base = p.apply(ds.X) - ds.A
    delta = pilot.h

    def wbar(shift_a):
        return float(np.mean(scaled_kernel_value(pilot, base + shift_a) / dens * g))

    _, m2, _ = kernel_moments(pilot.family)
    second = (wbar(delta) - 2.0 * wbar(0.0) + wbar(-delta)) / delta**2
    return 0.5 * m2 * second


def assemble_variance(z, u, g, r: float) -> float:
    """Combine the three variance terms from weights ``z``, inverse policy
    densities ``u`` and integrand values ``g``."""
    z, u, g = (np.asarray(v, dtype=float) for v in (z, u, g))
    zs, zu = z.sum(), (z * u).sum()
    if not (zs > 0 and zu > 0):
        raise AllWeightsZero("no supported observations for the variance plug-in")
    w = float(z @ g) / zs
    g1 = float((z * u) @ g) / zu
    g2 = float((z * u) @ (g * g)) / zu
    return r * float(u.mean()) * (g2 - 2.0 * g1 * w + w * w)


def estimate_variance(
    ds: ObservationSet,
    prop: PropensityModel,
    p: PolicySpec,
    alpha: float,
    pilot: KernelConfig,
    outcome_shift: float = 0.0,
) -> float:
    """Plug-in variance coefficient ``V_hat``.

    ``f0(pi(X) | X)`` is floored at the propensity's positivity floor so that
    policies leaving the logging support give a finite estimate.

    Raises
    ------
    NonPositiveVariance
        If the assembled estimate is not (relatively) positive.
    """
    dens = check_positivity(prop, ds)
    g = _integrand(ds.Y, alpha, outcome_shift)
    a_pi = p.apply(ds.X)
    z = scaled_kernel_value(pilot, a_pi - ds.A) / dens
    u = 1.0 / np.maximum(prop.density(a_pi, ds.X), prop.positivity_floor)
    _, _, r = kernel_moments(pilot.family)
    v = assemble_variance(z, u, g, r)
    scale = r * float(u.mean()) * float(np.max(g * g))
    if not v > 1e-12 * scale:
        raise NonPositiveVariance(f"variance plug-in {v:.3g} is not positive")
    return v


def rule_of_thumb(ds: ObservationSet, p: PolicySpec) -> float:
    """``1.06 * sd(pi(X) - A) * N^(-1/5)``."""
    if ds.n < 2:
        raise KdroError("rule-of-thumb bandwidth needs at least two observations")
    resid = p.apply(ds.X) - ds.A
    sd = float(np.std(resid, ddof=1))
    if not sd > 0:
        raise DegenerateResiduals("policy residuals have zero spread")
    return 1.06 * sd * ds.n ** (-0.2)


def plugin_bandwidth(b_hat: float, v_hat: float, n: int, fallback: Optional[float] = None) -> float:
    """AMSE-optimal ``(v / (4 n b^2))^(1/5)``; ``fallback`` when ``b_hat == 0``."""
    if not v_hat > 0 or n < 1:
        raise KdroError("plugin bandwidth needs v_hat > 0 and n >= 1")
    if b_hat == 0:
        if fallback is None:
            raise KdroError("zero bias coefficient and no fallback bandwidth supplied")
        return float(fallback)
    h = (v_hat / (4.0 * n * b_hat * b_hat)) ** 0.2
    logger.debug(
        "plug-in bandwidth %.6g (unsquared-bias variant %.6g)", h, (v_hat / (4.0 * n * abs(b_hat))) ** 0.2
    )
    return h


def clamp_bandwidth(h: float, ds: ObservationSet) -> tuple[float, bool]:
    hi = float(ds.A.max() - ds.A.min())
    hi = hi if hi > H_MIN else 1.0
    out = min(max(h, H_MIN), hi)
    if out != h:
        logger.info("bandwidth %.4g clamped to %.4g", h, out)
    return out, out != h


def select_bandwidth(
    ds: ObservationSet,
    prop: PropensityModel,
    p: PolicySpec,
    family: KernelFamily | str = KernelFamily.EPANECHNIKOV,
    eta: float = 0.05,
    rule: str = "plugin",
    solver: SolverOptions | None = None,
) -> BandwidthChoice:
    """Choose ``h`` for evaluating ``p`` on ``ds``.

    ``rule`` is ``"plugin"``, ``"rot"`` or ``"fixed:<value>"``.  The plug-in
    rule runs a pilot evaluation at the rule-of-thumb bandwidth, estimates
    ``B`` and ``V`` at the pilot ``alpha`` and falls back to the rule of
    thumb whenever an ingredient is degenerate.
    """
    family = KernelFamily(family)
    if rule.startswith("fixed:"):
        h = float(rule.split(":", 1)[1])
        return BandwidthChoice(KernelConfig(family, h).h, "fixed", h)
    h0, clamped = clamp_bandwidth(rule_of_thumb(ds, p), ds)
    if rule == "rot":
        return BandwidthChoice(h0, "rot", h0, clamped=clamped)
    if rule != "plugin":
        raise KdroError(f"unknown bandwidth rule {rule!r}")
    pilot = KernelConfig(family, h0)
    try:
        sol = evaluate_policy(ds, prop, p, pilot, eta, solver)
        alpha = sol.alpha_star
        if alpha == 0:
            raise NonPositiveVariance("pilot dual solution is on the alpha = 0 boundary")
        shift = float(ds.Y.min())
        b = estimate_bias(ds, prop, p, alpha, pilot, shift)
        v = estimate_variance(ds, prop, p, alpha, pilot, shift)
    except NumericalError as exc:
        logger.info("plug-in bandwidth unavailable (%s); using rule of thumb", exc)
        return BandwidthChoice(h0, "rot", h0, clamped=clamped, note=str(exc))
    h = plugin_bandwidth(b, v, ds.n, fallback=h0)
    h_unsq = (v / (4.0 * ds.n * abs(b))) ** 0.2 if b != 0 else math.nan
    h, clamped = clamp_bandwidth(h, ds)
    return BandwidthChoice(h, "plugin" if b != 0 else "rot", h0, b, v, alpha, h_unsq, clamped)
