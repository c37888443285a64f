import json
import pathlib

import pytest

from ergodic_hjb.builtins import BUILTINS
from ergodic_hjb.grid import Grid
from ergodic_hjb.pde_solver import solve_ergodic_vanishing_discount

GOLDEN = pathlib.Path(__file__).parent / "golden"

_CRITERIA = {}


@pytest.fixture(scope="session")
def singleton():
    return BUILTINS["ou_singleton_quadratic"].problem()


@pytest.fixture(scope="session")
def two_control():
    return BUILTINS["ou_two_control"].problem()


@pytest.fixture(scope="session")
def grid():
    return Grid([(-6.0, 6.0)], 0.01)


@pytest.fixture(scope="session")
def coarse_grid():
    return Grid([(-6.0, 6.0)], 0.05)


@pytest.fixture(scope="session")
def singleton_pair(singleton, grid):
    return solve_ergodic_vanishing_discount(singleton, grid)


@pytest.fixture(scope="session")
def two_control_pair(two_control, grid):
    return solve_ergodic_vanishing_discount(two_control, grid)


@pytest.fixture(scope="session")
def golden_two_control():
    return json.loads((GOLDEN / "two_control.json").read_text())


@pytest.fixture
def measured(request):
    """Attach a one-line measurement to an acceptance test."""

    def _record(text: str):
        request.node.user_properties.append(("measured", text))

    return _record


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        text = "; ".join(v for k, v in report.user_properties if k == "measured")
        _CRITERIA[name] = ("PASS" if report.passed else "FAIL", text)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        status, text = _CRITERIA[name]
        number = name.split("_")[2]
        terminalreporter.write_line(f"criterion {number}: {status}  {name}  [{text}]")
