import math

import pytest

from wavemaplab import corrections, outer
from wavemaplab.modulation import ModulationParams, solve_modulation


@pytest.fixture(scope="session")
def mod_computed():
    return solve_modulation(ModulationParams(c_source="computed"))


@pytest.fixture(scope="session")
def mod_stated():
    return solve_modulation(ModulationParams(c_source="paper"))


@pytest.fixture(scope="session")
def setup_computed(mod_computed):
    return corrections.CorrectionSetup(mod_computed, corrections.ConeProfile(outer.OuterParams()))


@pytest.fixture(scope="session")
def setup_stated(mod_stated):
    return corrections.CorrectionSetup(mod_stated, corrections.ConeProfile(outer.OuterParams()))


def t_at_tau(mod, tau):
    return float(mod.t_at_log_tau(math.log(tau)))


ACCEPTANCE_LINES = {}


def record_criterion(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
