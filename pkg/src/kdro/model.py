"""Observational datasets, analytic propensity models and policy classes."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import DimensionMismatch, KdroError, NonFiniteEntry, OutcomeOutOfBounds, PositivityViolation


def _frozen(arr, ndim: int, name: str) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != ndim:
        raise DimensionMismatch(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Immutable logged triples ``(X_i, A_i, Y_i)`` with known outcome bound ``M``."""

    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    outcome_bound: float

    def __post_init__(self):
        X = _frozen(self.X, 2, "X")
        A = _frozen(self.A, 1, "A")
        Y = _frozen(self.Y, 1, "Y")
        if not (X.shape[0] == A.shape[0] == Y.shape[0]):
            raise DimensionMismatch(
                f"row counts differ: X {X.shape[0]}, A {A.shape[0]}, Y {Y.shape[0]}"
            )
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "outcome_bound", float(self.outcome_bound))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "ObservationSet":
        idx = np.asarray(idx)
        return ObservationSet(self.X[idx], self.A[idx], self.Y[idx], self.outcome_bound)

    def __eq__(self, other):
        if not isinstance(other, ObservationSet):
            return NotImplemented
        return (
            self.outcome_bound == other.outcome_bound
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.A, other.A)
            and np.array_equal(self.Y, other.Y)
        )

    __hash__ = None

    # CSV layout: x_0, ..., x_{d-1}, a, y
    def to_csv(self, path: Union[str, Path, None] = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"x_{j}" for j in range(self.d)] + ["a", "y"])
        for i in range(self.n):
            writer.writerow([repr(float(v)) for v in self.X[i]] + [repr(float(self.A[i])), repr(float(self.Y[i]))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source: Union[str, Path], outcome_bound: float) -> "ObservationSet":
        """Read a CSV produced by :meth:`to_csv` (path or literal text)."""
        if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
            source = Path(source).read_text()
        rows = list(csv.reader(io.StringIO(source)))
        header, body = rows[0], [r for r in rows[1:] if r]
        if header[-2:] != ["a", "y"] or any(h != f"x_{j}" for j, h in enumerate(header[:-2])):
            raise KdroError(f"unexpected CSV header {header!r}")
        data = np.array(body, dtype=float).reshape(len(body), len(header))
        return cls(data[:, :-2], data[:, -2], data[:, -1], outcome_bound)


def validate_dataset(ds: ObservationSet) -> ObservationSet:
    """Check finiteness, ``N >= 1`` and ``0 <= Y <= M``; return ``ds`` unchanged."""
    if ds.n < 1:
        raise DimensionMismatch("dataset must contain at least one observation")
    for name in ("X", "A", "Y"):
        if not np.all(np.isfinite(getattr(ds, name))):
            raise NonFiniteEntry(f"{name} contains non-finite entries")
    if not (math.isfinite(ds.outcome_bound) and ds.outcome_bound > 0):
        raise OutcomeOutOfBounds(f"outcome bound must be positive, got {ds.outcome_bound}")
    if ds.Y.min() < 0 or ds.Y.max() > ds.outcome_bound:
        raise OutcomeOutOfBounds(
            f"outcomes span [{ds.Y.min():.6g}, {ds.Y.max():.6g}], outside [0, {ds.outcome_bound}]"
        )
    return ds


# ----------------------------------------------------------------------------
# Propensity models


@dataclass(frozen=True, eq=False)
class UniformShift:
    """``A | X ~ Uniform(lo(X), hi(X))`` with affine endpoints."""

    lo_intercept: float = 0.0
    lo_coef: tuple = (1.0,)
    hi_intercept: float = 1.0
    hi_coef: tuple = (1.0,)
    positivity_floor: float = 1.0

    kind = "uniform_shift"

    def __post_init__(self):
        object.__setattr__(self, "lo_coef", tuple(float(v) for v in self.lo_coef))
        object.__setattr__(self, "hi_coef", tuple(float(v) for v in self.hi_coef))
        if len(self.lo_coef) != len(self.hi_coef):
            raise DimensionMismatch("lo and hi coefficient vectors differ in length")
        if self.positivity_floor <= 0:
            raise KdroError("positivity floor must be positive")

    @property
    def d(self) -> int:
        return len(self.lo_coef)

    def bounds(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = _as_matrix(X, self.d)
        lo = self.lo_intercept + X @ np.asarray(self.lo_coef)
        hi = self.hi_intercept + X @ np.asarray(self.hi_coef)
        return lo, hi

    def density(self, a, X) -> np.ndarray:
        lo, hi = self.bounds(X)
        a = np.asarray(a, dtype=float)
        inside = (a >= lo) & (a <= hi)
        return np.where(inside, 1.0 / (hi - lo), 0.0)

    def sample(self, X, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.bounds(X)
        return lo + (hi - lo) * rng.random(lo.shape[0])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "lo_intercept": self.lo_intercept,
            "lo_coef": list(self.lo_coef),
            "hi_intercept": self.hi_intercept,
            "hi_coef": list(self.hi_coef),
            "positivity_floor": self.positivity_floor,
        }


@dataclass(frozen=True, eq=False)
class GaussianLinear:
    """``A | X ~ N(theta'X + shift_intercept + shift_coef'X, variance)``.

    ``spread`` is read as a variance unless ``spread_is_std`` is set.
    """

    theta: tuple
    shift_coef: tuple = ()
    shift_intercept: float = 0.0
    spread: float = 0.1
    spread_is_std: bool = False
    positivity_floor: float = 1e-10

    kind = "gaussian_linear"

    def __post_init__(self):
        theta = tuple(float(v) for v in self.theta)
        shift = tuple(float(v) for v in self.shift_coef) or (0.0,) * len(theta)
        if len(shift) != len(theta):
            raise DimensionMismatch("shift coefficients must match theta in length")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "shift_coef", shift)
        if self.spread <= 0 or self.positivity_floor <= 0:
            raise KdroError("spread and positivity floor must be positive")

    @property
    def d(self) -> int:
        return len(self.theta)

    @property
    def variance(self) -> float:
        return self.spread**2 if self.spread_is_std else self.spread

    def mean(self, X) -> np.ndarray:
        X = _as_matrix(X, self.d)
        coef = np.asarray(self.theta) + np.asarray(self.shift_coef)
        return self.shift_intercept + X @ coef

    def density(self, a, X) -> np.ndarray:
        r = np.asarray(a, dtype=float) - self.mean(X)
        var = self.variance
        return np.exp(-0.5 * r * r / var) / math.sqrt(2.0 * math.pi * var)

    def sample(self, X, rng: np.random.Generator) -> np.ndarray:
        mu = self.mean(X)
        return mu + math.sqrt(self.variance) * rng.standard_normal(mu.shape[0])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "theta": list(self.theta),
            "shift_coef": list(self.shift_coef),
            "shift_intercept": self.shift_intercept,
            "spread": self.spread,
            "spread_is_std": self.spread_is_std,
            "positivity_floor": self.positivity_floor,
        }


PropensityModel = Union[UniformShift, GaussianLinear]


def propensity_from_dict(cfg: dict) -> PropensityModel:
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind == UniformShift.kind:
        return UniformShift(**cfg)
    if kind == GaussianLinear.kind:
        return GaussianLinear(**cfg)
    raise KdroError(f"unknown propensity kind {kind!r}")


def propensity_density(m: PropensityModel, a, x) -> float | np.ndarray:
    """``f0(a | x)`` for a single covariate vector or a batch of rows."""
    scalar = np.ndim(a) == 0
    out = m.density(np.atleast_1d(a), x)
    return float(out[0]) if scalar else out


def check_positivity(m: PropensityModel, ds: ObservationSet) -> np.ndarray:
    """Return ``f0(A_i | X_i)``; raise if any value is below the floor."""
    dens = m.density(ds.A, ds.X)
    bad = dens < m.positivity_floor
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise PositivityViolation(
            f"f0(A|X) = {dens[i]:.3g} < floor {m.positivity_floor:.3g} at observation {i}"
        )
    return dens


def _as_matrix(X, d: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1) if X.shape[0] == d and d > 1 else X.reshape(-1, 1)
    if X.shape[1] != d:
        raise DimensionMismatch(f"expected {d} covariates, got {X.shape[1]}")
    return X


# ----------------------------------------------------------------------------
# Policy classes


@dataclass(frozen=True)
class ScalarMultiple:
    """``pi(x) = beta * x`` for scalar ``x`` and ``beta`` in ``[lo, hi]``."""

    beta: float = 1.0
    lo: float = 1.0
    hi: float = 3.0

    kind = "scalar_multiple"
    d = 1

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise KdroError("ScalarMultiple requires lo <= hi")
        if not self.lo - 1e-12 <= self.beta <= self.hi + 1e-12:
            raise KdroError(f"beta={self.beta} outside [{self.lo}, {self.hi}]")
        object.__setattr__(self, "beta", float(min(max(self.beta, self.lo), self.hi)))

    @property
    def params(self) -> np.ndarray:
        return np.array([self.beta])

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.lo])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.hi])

    def with_params(self, params) -> "ScalarMultiple":
        beta = float(np.clip(np.asarray(params, dtype=float).reshape(-1)[0], self.lo, self.hi))
        return ScalarMultiple(beta, self.lo, self.hi)

    def center(self) -> "ScalarMultiple":
        return self.with_params([0.5 * (self.lo + self.hi)])

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            if X.shape[1] != 1:
                raise DimensionMismatch(f"ScalarMultiple needs d=1, got d={X.shape[1]}")
            X = X[:, 0]
        return self.beta * X

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta": self.beta, "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class Linear:
    """``pi(x) = w'x`` with ``||w||_inf <= bound``."""

    w: tuple
    bound: float = 2.0

    kind = "linear"

    def __post_init__(self):
        w = tuple(float(v) for v in np.asarray(self.w, dtype=float).reshape(-1))
        if self.bound <= 0:
            raise KdroError("sup-norm bound must be positive")
        if any(abs(v) > self.bound + 1e-12 for v in w):
            raise KdroError(f"||w||_inf exceeds bound {self.bound}")
        object.__setattr__(self, "w", tuple(float(np.clip(v, -self.bound, self.bound)) for v in w))

    @property
    def d(self) -> int:
        return len(self.w)

    @property
    def params(self) -> np.ndarray:
        return np.asarray(self.w)

    @property
    def lower(self) -> np.ndarray:
        return np.full(self.d, -self.bound)

    @property
    def upper(self) -> np.ndarray:
        return np.full(self.d, self.bound)

    def with_params(self, params) -> "Linear":
        return Linear(tuple(np.clip(np.asarray(params, dtype=float), -self.bound, self.bound)), self.bound)

    def center(self) -> "Linear":
        return self.with_params(np.zeros(self.d))

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.d:
            raise DimensionMismatch(f"policy has d={self.d}, covariates have d={X.shape[-1]}")
        return X @ np.asarray(self.w)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "w": list(self.w), "bound": self.bound}


PolicySpec = Union[ScalarMultiple, Linear]


def policy_from_dict(cfg: dict) -> PolicySpec:
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind == ScalarMultiple.kind:
        return ScalarMultiple(**cfg)
    if kind == Linear.kind:
        return Linear(**cfg)
    raise KdroError(f"unknown policy kind {kind!r}")


def policy_apply(p: PolicySpec, x) -> float:
    """Treatment assigned to a single covariate vector ``x``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim != 1 or x.shape[0] != p.d:
        raise DimensionMismatch(f"policy expects {p.d} covariates, got shape {x.shape}")
    return float(p.apply(x.reshape(1, -1))[0])
