import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mmshr.tensor import default_dtype

settings.register_profile(
    "repo",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("repo")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def f64():
    """Run the test body with float64 as the default tensor dtype."""
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
