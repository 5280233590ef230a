import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mbe_lab.spectral import make_grid

settings.register_profile(
    "mbe", max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("mbe")

TWO_PI = 2 * np.pi


@pytest.fixture
def grid1():
    return make_grid(1, 32, TWO_PI)


@pytest.fixture
def grid2():
    return make_grid(2, 16, TWO_PI)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
