import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from drlogit.core import Dataset

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)


def random_dataset(rng, n=200, p=3, beta=0.5):
    x = rng.standard_normal((n, p))
    a = x[:, 0] * 0.5 + rng.standard_normal(n)
    eta = beta * a + x @ np.linspace(0.3, -0.3, p)
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    return Dataset(y, a, x)
