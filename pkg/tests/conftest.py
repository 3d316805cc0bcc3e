import numpy as np
import pytest

from jobvalues.model import EconomyParams, expected_flows, solve_values, stationary_distribution


def random_economy(J, seed=0, sigma=1.0, spread=0.5, lambda0=0.6, lambda1=0.3, u_N=-0.1, rho_max=0.05,
                   beta=1 / 1.05):
    g = np.random.default_rng(seed)
    return EconomyParams(
        psi=g.uniform(-spread, spread, J), a=g.uniform(-spread, spread, J),
        delta=g.uniform(0.02, 0.1, J), rho=g.uniform(0.0, rho_max, J),
        f=g.dirichlet(np.full(J, 5.0)), lambda0=lambda0, lambda1=lambda1, beta=beta, sigma=sigma, u_N=u_N,
    )


def exact_flows(params, mass=1e5):
    """Expected flows at the stationary distribution of ``params``."""
    vals = solve_values(params, params.flow_utility())
    pi = stationary_distribution(params, vals) * mass
    return expected_flows(params, vals, pi[:-1], pi[-1]), vals


@pytest.fixture
def economy5():
    return random_economy(5, seed=11)


# acceptance outcomes, filled by test_acceptance and echoed after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {text}")
