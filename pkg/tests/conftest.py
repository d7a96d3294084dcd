from __future__ import annotations

import numpy as np
import pytest

from mssl.core import PenaltyConfig, standardize
from mssl.simlab import SimScenario, generate


def small_config(data, lambda0=None, xi0=None, L=1, lambda1=1.0, xi1=None):
    n = data.n
    xi1 = 0.01 * n if xi1 is None else xi1
    lam = np.linspace(10.0, n, L) if lambda0 is None else np.atleast_1d(np.asarray(lambda0, float))
    xi = np.linspace(0.1 * n, n, L) if xi0 is None else np.atleast_1d(np.asarray(xi0, float))
    return PenaltyConfig(lambda1=lambda1, xi1=xi1, lambda_ladder=lam, xi_ladder=xi,
                         a_theta=1.0, b_theta=float(data.p * data.q), a_eta=1.0, b_eta=float(data.q))


@pytest.fixture
def sim_small():
    """A small instance with real structure: n=60, p=12, q=5."""
    scn = SimScenario(n=60, p=12, q=5, rho=0.7, seed=11)
    data, B0, Omega0, _ = generate(scn, 0)
    return data, B0, Omega0


@pytest.fixture
def random_data():
    def make(n, p, q, seed=0):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((n, p))
        Y = X @ rng.standard_normal((p, q)) * 0.5 + rng.standard_normal((n, q))
        return standardize(X, Y)
    return make


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
