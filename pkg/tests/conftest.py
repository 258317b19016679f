"""Shared fixtures and the hypothesis profile for the test suite."""
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from soshydro.gibbs import make_rng
from soshydro.lattice import parse_mobility

settings.register_profile(
    "soshydro",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("soshydro")

MOBILITY_SPECS = ("constant(1)", "constant(2)", "bump(0.1)", "bump(0.3)")


@pytest.fixture
def rng():
    return make_rng(20240601)


@pytest.fixture(params=["constant(1)", "bump(0.1)"])
def mob(request):
    return parse_mobility(request.param)


@pytest.fixture
def bump():
    return parse_mobility("bump(0.1)")


@pytest.fixture
def const2():
    return parse_mobility("constant(2)")


def zscore(estimate, target, stderr):
    """Distance of an estimate from its target in standard errors."""
    return abs(estimate - target) / stderr if stderr > 0 else (0.0 if estimate == target else np.inf)


# One line per acceptance criterion, repeated in the terminal summary so the
# verdicts survive output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
