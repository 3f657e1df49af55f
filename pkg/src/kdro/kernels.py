"""Second-order smoothing kernels for a scalar treatment.

The estimators replace the exact-match indicator ``1{pi(X) = A}`` by the
scaled kernel ``K_h(pi(X) - A) = K((pi(X) - A) / h) / h``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate

from .errors import KdroError

_SQRT_2PI = math.sqrt(2.0 * math.pi)

# Gaussian quadrature is carried out on |u| <= 12; the neglected tail mass is < 1e-30.
GAUSSIAN_TRUNCATION = 12.0


class KernelFamily(str, enum.Enum):
    EPANECHNIKOV = "epanechnikov"
    GAUSSIAN = "gaussian"

    @property
    def bound(self) -> float:
        """Sup-norm ``M_K`` of the base kernel."""
        return 0.75 if self is KernelFamily.EPANECHNIKOV else 1.0 / _SQRT_2PI

    @property
    def support(self) -> tuple[float, float]:
        if self is KernelFamily.EPANECHNIKOV:
            return (-1.0, 1.0)
        return (-GAUSSIAN_TRUNCATION, GAUSSIAN_TRUNCATION)


@dataclass(frozen=True)
class KernelConfig:
    """Kernel family together with a bandwidth in treatment units."""

    family: KernelFamily = KernelFamily.EPANECHNIKOV
    h: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily(self.family))
        if not (math.isfinite(self.h) and self.h > 0):
            raise KdroError(f"bandwidth must be positive and finite, got {self.h!r}")

    def with_bandwidth(self, h: float) -> "KernelConfig":
        return KernelConfig(self.family, float(h))


def kernel_value(family: KernelFamily | str, u):
    """Evaluate the base kernel ``K(u)``; works elementwise on arrays."""
    family = KernelFamily(family)
    u = np.asarray(u, dtype=float)
    if family is KernelFamily.EPANECHNIKOV:
        # 1 - u^2 > 0 exactly when |u| < 1
        out = np.maximum(0.75 * (1.0 - u * u), 0.0)
    else:
        out = np.exp(-0.5 * u * u) / _SQRT_2PI
    return out[()] if out.ndim == 0 else out


def scaled_kernel_value(cfg: KernelConfig, x):
    """``K_h(x) = K(x / h) / h``."""
    return kernel_value(cfg.family, np.asarray(x, dtype=float) / cfg.h) / cfg.h


@lru_cache(maxsize=None)
def kernel_moments(family: KernelFamily | str) -> tuple[float, float, float]:
    """Return ``(int K, int u^2 K, int K^2)`` by adaptive quadrature.

    Raises
    ------
    KdroError
        If the quadrature error estimate is not below 1e-10; this can only
        happen through an internal defect.
    """
    family = KernelFamily(family)
    lo, hi = family.support
    results = []
    for integrand in (
        lambda u: kernel_value(family, u),
        lambda u: u * u * kernel_value(family, u),
        lambda u: kernel_value(family, u) ** 2,
    ):
        value, err = integrate.quad(integrand, lo, hi, epsabs=1e-13, epsrel=1e-13, limit=200)
        if err > 1e-10:
            raise KdroError(f"kernel moment quadrature did not converge (err={err:.2e})")
        results.append(value)
    return tuple(results)


def first_moment(family: KernelFamily | str) -> float:
    """``int u K(u) du``; zero for every symmetric kernel."""
    family = KernelFamily(family)
    lo, hi = family.support
    value, _ = integrate.quad(lambda u: u * kernel_value(family, u), lo, hi, epsabs=1e-13)
    return value
