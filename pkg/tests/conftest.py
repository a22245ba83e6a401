from __future__ import annotations

import numpy as np
import pytest

from _report import RESULTS, summary_lines


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in summary_lines():
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def p95():
    from capsule_dfc.model import Params
    return Params(omega=0.95)


@pytest.fixture(scope="session")
def runs95(p95):
    """350-period runs at omega=0.95 from the two reference seeds."""
    from capsule_dfc.integrator import integrate
    T = p95.period
    return {
        "period-1": integrate(p95, (0.0, 0.0, 0.0, 0.0), (0.0, 350 * T)),
        "period-3": integrate(p95, (-2.0, 0.0, 0.0, 0.0), (0.0, 350 * T)),
    }


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240607)
