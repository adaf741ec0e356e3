from __future__ import annotations

import numpy as np
import pytest

from weighted_ips.model import AssumptionConstants, Coefficients, InitialLaw, make_model
from weighted_ips.testcases import BarenblattParams


def constant_coefficients(d=1, p=None, phi=0.0, drift=None, lam=0.0):
    """Coefficients that ignore (t, x, z)."""
    p = d if p is None else p
    drift = np.zeros(d) if drift is None else np.asarray(drift, dtype=float)
    phi_mat = np.asarray(phi, dtype=float) * np.eye(d, p) if np.ndim(phi) == 0 else np.asarray(phi, dtype=float)
    return Coefficients(
        phi=lambda t, x, z: np.broadcast_to(phi_mat, (x.shape[0], d, p)).copy(),
        g=lambda t, x, z: np.broadcast_to(drift, (x.shape[0], d)).copy(),
        lam=lambda t, x, z: np.full(x.shape[0], float(lam)),
        d=d,
        p=p,
    )


def gaussian_model(d=1, phi=0.0, drift=None, lam=0.0, m_lambda=None):
    consts = AssumptionConstants(m_lambda=abs(lam) if m_lambda is None else m_lambda)
    init = InitialLaw.gaussian(np.zeros(d), 1.0)
    return make_model(constant_coefficients(d, phi=phi, drift=drift, lam=lam), consts, init)


@pytest.fixture(scope="session")
def benchmark_params():
    return BarenblattParams()


@pytest.fixture(scope="session")
def conservative_params():
    return BarenblattParams(A=0.0)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(RESULTS.items()):
        terminalreporter.write_line(line)
