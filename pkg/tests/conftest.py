import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# Acceptance outcomes gathered by tests/test_acceptance.py and echoed in the terminal summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_instance(rng, n_lo=3, n_hi=30, m=10.0):
    """Positive weights, bounded outcomes and a radius, as used by the solver oracles."""
    n = int(rng.integers(n_lo, n_hi + 1))
    z = rng.exponential(1.0, n) * rng.choice([1e-3, 1.0, 1e3])
    y = rng.uniform(0.0, m, n)
    eta = float(rng.uniform(0.01, 1.0))
    return z, y, eta


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
