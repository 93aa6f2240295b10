import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gridpulse.grid import ieee39, solve_power_flow

settings.register_profile(
    "default", deadline=None, max_examples=int(os.environ.get("HYPOTHESIS_EXAMPLES", 40)),
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture(scope="session")
def grid39():
    return ieee39()


@pytest.fixture(scope="session")
def op39(grid39):
    return solve_power_flow(grid39)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def criteria(request):
    """Collects one (criterion, passed, detail) line per acceptance check."""
    if not hasattr(request.config, "_criteria"):
        request.config._criteria = []
    return request.config._criteria


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criteria", [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(lines, key=lambda r: int(r[0].split()[1])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
