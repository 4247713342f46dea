import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from meldctl.config import fixture_path, load_config  # noqa: E402
from meldctl.models import build_model  # noqa: E402
from meldctl.pipeline import build_scenario, certify_scenario, simulate  # noqa: E402

HOME = np.array([0.0, np.pi / 4, 0.0, 0.0, 0.0, 0.0])


@pytest.fixture(scope="session")
def arm():
    return build_model("manipulator-3r")


@pytest.fixture(scope="session")
def dint():
    return build_model("double-integrator")


@pytest.fixture(scope="session")
def degrees():
    return (2,) * 7


@pytest.fixture(scope="session")
def pick_place():
    """The five-meld pick-and-place scenario on its original item timeline."""
    return build_scenario(load_config(fixture_path("arm_pickplace.ini")))


@pytest.fixture(scope="session")
def pick_place_trace(pick_place):
    scn = pick_place
    return simulate(scn, scn.schedule, scn.refs, scn.t_end, scn.config.dt)


@pytest.fixture(scope="session")
def certified_run():
    """(scenario, certificate, schedule, trace) of the auto-certified fixture."""
    scn = build_scenario(load_config(fixture_path("arm_pickplace_certified.ini")))
    cert, schedule, refs, t_end = certify_scenario(scn)
    trace = simulate(scn, schedule, refs, t_end, scn.config.dt, bound_S=cert.S)
    return scn, cert, schedule, trace


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
