import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jobvalues.errors import ContractError, NumericalError
from jobvalues.model import (EULER_GAMMA, EconomyParams, FlowUtility, ValueVector, acceptance_probability,
                             expected_flows, gumbel_expected_max, invert_flow_utility, solve_values,
                             value_iteration)

from conftest import random_economy

pos = st.floats(min_value=1e-300, max_value=1e300, allow_nan=False, allow_infinity=False)


def brute_force_values(p, u, u_N, tol=1e-13):
    """Independent value iteration written with explicit loops over employers."""
    J = p.J
    s = p.sigma
    v = np.zeros(J)
    vN = 0.0
    for _ in range(100_000):
        nv = np.empty(J)
        for j in range(J):
            e_reloc = sum(p.f[k] * s * v[k] for k in range(J)) + EULER_GAMMA
            e_offer = sum(p.f[k] * np.logaddexp(s * v[j], s * v[k]) for k in range(J)) + EULER_GAMMA
            e_quit = np.logaddexp(s * v[j], s * vN) + EULER_GAMMA
            cont = (p.delta[j] * (s * vN + EULER_GAMMA) + p.rho[j] * e_reloc
                    + (1 - p.delta[j] - p.rho[j]) * (p.lambda1 * e_offer + (1 - p.lambda1) * e_quit))
            nv[j] = u[j] + p.beta * cont / s
        e_hire = sum(p.f[k] * np.logaddexp(s * v[k], s * vN) for k in range(J)) + EULER_GAMMA
        nvN = u_N + p.beta * (p.lambda0 * e_hire + (1 - p.lambda0) * (s * vN + EULER_GAMMA)) / s
        done = max(np.abs(nv - v).max(), abs(nvN - vN)) < tol
        v, vN = nv, nvN
        if done:
            return v, vN
    raise AssertionError("oracle did not converge")


class TestAcceptance:
    def test_symmetry(self):
        assert acceptance_probability(1.0, 1.0) == 0.5

    def test_logistic_identity(self):
        assert acceptance_probability(1.0, np.e) == pytest.approx(np.e / (1 + np.e), abs=1e-12)

    @given(pos, pos)
    def test_complements_sum_to_one_exactly(self, x, y):
        assert acceptance_probability(x, y) + acceptance_probability(y, x) == 1.0

    @pytest.mark.parametrize("bad", [0.0, -1.0, np.inf, np.nan])
    def test_domain_errors(self, bad):
        with pytest.raises(ContractError):
            acceptance_probability(bad, 1.0)

    def test_monte_carlo_gumbel_choice(self):
        g = np.random.default_rng(0)
        n = 1_000_000
        vo, vd = 0.3, 0.8
        rate = np.mean(vd + g.gumbel(size=n) > vo + g.gumbel(size=n))
        assert abs(rate - acceptance_probability(np.exp(vo), np.exp(vd))) < 0.005


class TestGumbelMax:
    def test_single_value(self):
        assert gumbel_expected_max([0.0]) == pytest.approx(EULER_GAMMA, abs=1e-15)

    def test_two_zeros(self):
        assert gumbel_expected_max([0.0, 0.0]) == pytest.approx(np.log(2) + EULER_GAMMA, abs=1e-12)

    def test_monte_carlo(self):
        v = np.array([0.5, 1.5, -0.2])
        g = np.random.default_rng(1)
        mc = np.max(v + g.gumbel(size=(1_000_000, 3)), axis=1).mean()
        assert abs(mc - gumbel_expected_max(v)) < 0.005

    def test_empty_is_error(self):
        with pytest.raises(ContractError):
            gumbel_expected_max([])

    def test_dominant_entry(self):
        assert gumbel_expected_max([100.0, 59.0, 50.0]) == pytest.approx(100 + EULER_GAMMA, abs=1e-15)

    def test_no_overflow(self):
        assert np.isfinite(gumbel_expected_max([700.0, 710.0]))

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.randoms())
    def test_permutation_invariant_and_monotone(self, xs, rnd):
        ys = xs[:]
        rnd.shuffle(ys)
        assert gumbel_expected_max(xs) == pytest.approx(gumbel_expected_max(ys), abs=1e-12)
        bumped = xs[:]
        bumped[0] += 0.5
        assert gumbel_expected_max(bumped) >= gumbel_expected_max(xs)


class TestParams:
    def test_invariants_enforced(self):
        base = dict(psi=[0, 0], a=[0, 0], delta=[0.5, 0.1], rho=[0.5, 0.1], f=[0.5, 0.5], lambda0=0.5,
                    lambda1=0.5)
        with pytest.raises(ContractError):
            EconomyParams(**base)
        with pytest.raises(ContractError):
            EconomyParams(**{**base, "delta": [0.1, 0.1], "f": [0.5, 0.6]})
        with pytest.raises(ContractError):
            EconomyParams(**{**base, "delta": [0.1, 0.1], "beta": 1.0})

    def test_immutable(self):
        p = random_economy(3)
        with pytest.raises(ValueError):
            p.psi[0] = 1.0


class TestExpectedFlows:
    def test_no_mobility_when_all_channels_closed(self):
        p = EconomyParams(psi=[0, 0.2], a=[0, 0], delta=[0, 0], rho=[0, 0], f=[0.5, 0.5], lambda0=0.5,
                          lambda1=0.0)
        fl = expected_flows(p, ValueVector([0.0, 1.0], 0.0), [10, 10], 5)
        assert fl.ee.nnz == 0
        assert np.all(fl.parts["ee_voluntary"] == 0)
        assert np.all(fl.parts["en_exogenous"] == 0)

    def test_symmetric_employers(self):
        p = EconomyParams(psi=[0.1, 0.1], a=[0, 0], delta=[0.05, 0.05], rho=[0.02, 0.02], f=[0.5, 0.5],
                          lambda0=0.5, lambda1=0.3)
        M = expected_flows(p, ValueVector([1.0, 1.0], 0.0), [50, 50], 10).ee_dense()
        assert M[0, 1] == M[1, 0]

    def test_hand_case(self):
        p = EconomyParams(psi=[0, 0], a=[0, 0], delta=[0, 0], rho=[0, 0], f=[0.5, 0.5], lambda0=0.5,
                          lambda1=0.2, sigma=1.0)
        M = expected_flows(p, ValueVector([0.0, 1.0], 0.0, scaled=True), [100, 100], 10).ee_dense()
        assert M[0, 1] == pytest.approx(100 * 0.2 * 0.5 * np.e / (1 + np.e), abs=1e-10)
        assert M[1, 0] == pytest.approx(100 * 0.2 * 0.5 / (1 + np.e), abs=1e-10)
        assert M[0, 1] == pytest.approx(7.3106, abs=1e-4)

    def test_mass_accounting(self):
        p = random_economy(8, seed=3)
        vals = solve_values(p, p.flow_utility())
        L = np.random.default_rng(0).uniform(10, 100, 8)
        fl = expected_flows(p, vals, L, 30.0)
        stayers = L - np.asarray(fl.ee.sum(axis=1)).ravel() - fl.en
        assert np.all(stayers >= 0)
        assert np.all(fl.ee.data >= 0) and np.all(fl.en >= 0) and np.all(fl.ne >= 0)

    def test_dimension_mismatch(self):
        p = random_economy(3)
        with pytest.raises(ContractError):
            expected_flows(p, ValueVector(np.zeros(2), 0.0), np.ones(3), 1.0)


class TestValues:
    def test_myopic_limit(self):
        p = random_economy(4, beta=1e-12)
        vals = solve_values(p, p.flow_utility())
        assert np.max(np.abs(vals.V - (p.psi + p.a))) < 1e-9
        assert abs(vals.V_N - p.u_N) < 1e-9

    def test_identical_employers(self):
        J = 6
        p = EconomyParams(psi=np.full(J, 0.2), a=np.zeros(J), delta=np.full(J, 0.05), rho=np.full(J, 0.02),
                          f=np.full(J, 1 / J), lambda0=0.5, lambda1=0.3, sigma=1.5)
        V = solve_values(p, p.flow_utility()).V
        assert np.ptp(V) < 1e-10

    def test_matches_independent_oracle(self, economy5):
        p = economy5
        vals = solve_values(p, p.flow_utility())
        v, vN = brute_force_values(p, p.psi + p.a, p.u_N)
        assert np.max(np.abs(vals.V - v)) < 1e-9
        assert abs(vals.V_N - vN) < 1e-9

    def test_fixed_point(self, economy5):
        p = economy5
        vals = solve_values(p, p.flow_utility())
        back = invert_flow_utility(p, vals)
        assert np.max(np.abs(back.u - (p.psi + p.a))) < 1e-8

    def test_contraction_of_residuals(self, economy5):
        p = economy5
        v, _, res = value_iteration(p, (p.psi + p.a) * p.sigma, p.u_N * p.sigma)
        r = np.array(res)
        # each residual is computed in floating point from values of size |v|
        slack = 64 * np.finfo(float).eps * np.abs(v).max()
        assert np.all(r[1:] <= p.beta * r[:-1] + slack)

    def test_location_invariance(self, economy5):
        p = economy5
        c = 0.7
        base = solve_values(p, p.flow_utility())
        shifted = solve_values(p, FlowUtility(p.psi + p.a + c, p.u_N + c))
        assert np.max(np.abs(shifted.V - base.V - c / (1 - p.beta))) < 1e-8
        assert abs(shifted.V_N - base.V_N - c / (1 - p.beta)) < 1e-8
        f1 = expected_flows(p, base, np.ones(5), 1.0)
        f2 = expected_flows(p, shifted, np.ones(5), 1.0)
        assert np.max(np.abs(f1.ee_dense() - f2.ee_dense())) < 1e-10

    def test_non_convergence_reports_residual(self, economy5):
        with pytest.raises(NumericalError) as exc:
            solve_values(economy5, economy5.flow_utility(), max_iter=3)
        assert exc.value.residual > 0 and len(exc.value.trace) == 3


class TestInversion:
    def test_symmetric_economy(self):
        J = 4
        p = EconomyParams(psi=np.full(J, 0.1), a=np.zeros(J), delta=np.full(J, 0.05), rho=np.full(J, 0.01),
                          f=np.full(J, 0.25), lambda0=0.5, lambda1=0.3)
        u = invert_flow_utility(p, ValueVector(np.full(J, 2.0), 1.0)).u
        assert np.ptp(u) < 1e-12

    def test_myopic(self):
        p = random_economy(4, beta=1e-12)
        V = np.array([0.3, -0.1, 0.2, 0.0])
        assert np.max(np.abs(invert_flow_utility(p, ValueVector(V, 0.1)).u - V)) < 1e-9

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 8), st.floats(0.3, 3.0))
    def test_round_trip_random(self, seed, J, sigma):
        p = random_economy(J, seed=seed, sigma=sigma)
        vals = solve_values(p, p.flow_utility())
        assert np.max(np.abs(invert_flow_utility(p, vals).u - (p.psi + p.a))) < 1e-8
