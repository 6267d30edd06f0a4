import numpy as np
import pytest

from patchdyn.fokker_planck import FIG4_PARAMS, gaussian_state, run_to_steady


@pytest.fixture(scope="session")
def fig4_fine_steady():
    """Long-run 1271-cell profile for the continuum parameters (steady-state oracle)."""
    s0 = gaussian_state(1271, FIG4_PARAMS)
    return run_to_steady(s0, FIG4_PARAMS, 2 * s0.dx_f**2, tol=1e-11)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(number, ok, detail):
        _ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
