import numpy as np
import pytest

from cascadesim.case_io import (
    BranchRecord,
    BusRecord,
    CaseDefinition,
    default_machine,
    load_builtin_case,
    synthesize_dynamics,
    validate_case,
)


def two_bus_case(p_load_mw=0.0, x=0.1, r=0.0, gen2=True, q_load_mvar=0.0):
    """Slack at bus 1, bus 2 held at 1 pu by a zero-output machine when ``gen2``."""
    buses = (BusRecord(id=1, kind="slack"),
             BusRecord(id=2, kind="PV" if gen2 else "PQ", p_load=p_load_mw, q_load=q_load_mvar))
    branches = (BranchRecord(id=1, from_bus=1, to_bus=2, r=r, x=x),)
    machines = [default_machine(1, 100.0, 200.0, p_load_mw, 0.0, 1.0, False)]
    if gen2:
        machines.append(default_machine(2, 100.0, 100.0, 0.0, 0.0, 1.0, True))
    return validate_case(CaseDefinition(base_mva=100.0, buses=buses, branches=branches,
                                        machines=tuple(machines), name="two-bus"))


@pytest.fixture(scope="session")
def case9():
    return synthesize_dynamics(load_builtin_case("case9"), seed=1)


@pytest.fixture(scope="session")
def case39():
    return synthesize_dynamics(load_builtin_case("case39"), seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
