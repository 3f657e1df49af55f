"""Exception hierarchy shared across the package."""
from __future__ import annotations


class KdroError(Exception):
    """Base class for all package errors."""


class DataError(KdroError, ValueError):
    """Input data violates a standing assumption."""


class NonFiniteEntry(DataError):
    pass


class OutcomeOutOfBounds(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class PositivityViolation(DataError):
    pass


class MissingAgeColumn(DataError):
    pass


class MissingDataFile(DataError):
    pass


class DegenerateBins(DataError):
    pass


class NumericalError(KdroError, ArithmeticError):
    """A numerical routine could not produce a meaningful answer."""


class AllWeightsZero(NumericalError):
    """Every kernel weight vanished: the policy has no data support."""


class MaxIterationsExceeded(NumericalError):
    pass


class DegeneratePolicySearch(NumericalError):
    pass


class NonPositiveVariance(NumericalError):
    pass


class DegenerateResiduals(NumericalError):
    pass


class CalibrationFailed(NumericalError):
    pass


class QuadratureBudgetExceeded(NumericalError):
    pass


class ConfigError(KdroError):
    """Invalid experiment configuration."""


class SeparationDetected(UserWarning):
    """Maximum-likelihood coefficients diverged and were clipped."""


class ExclusionLimitExceeded(NumericalError):
    """Too many Monte-Carlo replications failed to be reported."""


class VerificationFailed(NumericalError):
    """A re-run report cell did not reproduce the stored value."""
