import json
from pathlib import Path

import numpy as np
import pytest

from gridflow.case_io import builtin_case, parse_matpower

DATA = Path(__file__).parent / "data"

TWO_BUS = """
function mpc = twobus
mpc.version = '2';
mpc.baseMVA = 100;
%% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin
mpc.bus = [
    1  3  0   0   0 0 1 1.0 0 230 1 1.1 0.9;
    2  1  50  20  0 0 1 1.0 0 230 1 1.1 0.9;
];
%% bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin
mpc.gen = [
    1  0  0  300 -300 1.0 100 1 250 10;
];
%% fbus tbus r x b rateA rateB rateC ratio angle status angmin angmax
mpc.branch = [
    1  2  0.01  0.1  0  250 250 250 0 0 1 -360 360;
];
"""


@pytest.fixture(scope="session")
def two_bus_text():
    return TWO_BUS


@pytest.fixture(scope="session")
def two_bus():
    return parse_matpower(TWO_BUS)


@pytest.fixture(scope="session")
def case9():
    return builtin_case("case9")


@pytest.fixture(scope="session")
def case39():
    return builtin_case("case39")


@pytest.fixture(scope="session")
def case118():
    return builtin_case("case118")


def load_reference(name):
    return json.loads((DATA / f"reference_{name}.json").read_text())


@pytest.fixture(scope="session")
def small_dataset(case39):
    """100 labelled case39 scenarios, shared by the model-level tests."""
    from gridflow.datagen import generate

    return generate(case39, 100, seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary -------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
