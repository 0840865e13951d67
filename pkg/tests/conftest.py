import numpy as np
import pytest

from msmpam.ped import CutPoints, to_ped
from msmpam.sim import builtin_dgp, generate_study


@pytest.fixture(scope="session")
def ssts_small():
    """400 subjects from the SSTS illness-death DGP."""
    return generate_study(builtin_dgp("ssts_tableA1"), 400, seed=11, run_index=0).dataset


@pytest.fixture(scope="session")
def ssts_small_ped(ssts_small):
    return to_ped(ssts_small, CutPoints.grid(10.0, 0.5))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = []


@pytest.fixture(scope="session")
def verdict():
    """Record one acceptance line; printed in the terminal summary."""
    def record(number, ok, detail):
        _VERDICTS.append((number, bool(ok), detail))
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(_VERDICTS):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
