import numpy as np
import pytest

from horizon_nmpc.model import DiscreteSystem, QuadraticCost, SampledSystem, double_integrator, scalar_linear
from horizon_nmpc.ocp import OCPSolver

# criterion lines collected by test_acceptance.py, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


def _zero_field(x, u, params):
    return np.zeros_like(x)


def _zero_map(x, u, params):
    return x + 0.0 * u


@pytest.fixture
def integrator_system():
    """x+ = x + u with l = x^2 and |u| <= 1."""
    return scalar_linear(a=1.0, b=1.0, rho=0.0, u_max=1.0)


@pytest.fixture
def integrator_solver(integrator_system):
    return OCPSolver(*integrator_system)


@pytest.fixture
def still_system():
    """Zero dynamics in discrete time with l = x^2."""
    sys = DiscreteSystem(1, 1, _zero_map, 1.0, (-1.0, 1.0), name="still")
    return sys, QuadraticCost([[1.0]], [[0.0]])


@pytest.fixture
def zero_flow():
    return SampledSystem(2, 1, _zero_field, 0.2, (-1.0, 1.0), substeps=3, name="zero")


@pytest.fixture
def unstable_scalar():
    return scalar_linear(a=1.3, b=1.0, rho=2.0)


@pytest.fixture
def di():
    return double_integrator()
