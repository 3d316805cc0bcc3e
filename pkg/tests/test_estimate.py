import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import exact_flows, random_economy
from jobvalues.errors import IdentificationError
from jobvalues.estimate import (
    EmployerEstimates, SearchParams, assemble_estimates, calibrate_sigma_and_decompose, estimate_search_params,
    joint_estimate, outer_iteration, voluntary_value_fixed_point, weighted_corr, weighted_moments,
)
from jobvalues.flows import FlowMatrices
from jobvalues.model import accept_log, solve_values


def true_scaled(params, values):
    v = values.as_scaled(params.sigma)
    return v.V - v.V_N


def true_search(p):
    return SearchParams(p.f, p.delta, p.rho, p.lambda0, p.lambda1)


def test_fixed_point_matches_null_vector_oracle():
    p = random_economy(3, seed=21)
    flows, vals = exact_flows(p)
    est, vN = voluntary_value_fixed_point(flows, true_search(p))
    # oracle: solve the balance equations directly as a null-space problem
    S = np.exp(np.r_[true_scaled(p, vals), 0.0])
    J = 3
    f, s, L = p.f, p.s, flows.L
    F = np.zeros((J + 1, J + 1))
    K = np.zeros((J + 1, J + 1))
    for o in range(J):
        for d in range(J):
            if o != d:
                K[o, d] = L[o] * s[o] * p.lambda1 * f[d]
        K[o, J] = L[o] * s[o] * (1 - p.lambda1)
    K[J, :J] = flows.L_N * p.lambda0 * f
    F = K * S[None, :] / (S[:, None] + S[None, :])
    np.fill_diagonal(F, 0)
    W = np.divide(F, K, out=np.zeros_like(F), where=K > 0)
    A = np.diag(W.sum(1)) - W.T
    null = np.linalg.svd(A)[2][-1]
    null = null / null[-1]
    np.testing.assert_allclose(np.exp(est), null[:-1], rtol=1e-10)
    np.testing.assert_allclose(np.exp(est), S[:-1], rtol=1e-10)
    assert vN == 0.0


def test_fixed_point_symmetric_economy_gives_equal_values():
    J = 4
    from jobvalues.model import EconomyParams
    p = EconomyParams(psi=np.zeros(J), a=np.zeros(J), delta=np.full(J, 0.05), rho=np.full(J, 0.02),
                      f=np.full(J, 0.25), lambda0=0.5, lambda1=0.2, u_N=-0.3)
    flows, vals = exact_flows(p)
    v, _ = voluntary_value_fixed_point(flows, true_search(p))
    assert np.ptp(v) < 1e-12
    assert v[0] == pytest.approx(true_scaled(p, vals)[0], abs=1e-10)


def test_search_params_exact_at_true_values():
    p = random_economy(15, seed=2)
    flows, vals = exact_flows(p)
    s = estimate_search_params(flows, true_scaled(p, vals))
    np.testing.assert_allclose(s.f, p.f, atol=1e-12)
    np.testing.assert_allclose(s.delta, p.delta, atol=1e-10)
    np.testing.assert_allclose(s.rho, p.rho, atol=1e-10)
    assert s.lambda0 == pytest.approx(p.lambda0, abs=1e-12)
    assert s.lambda1 == pytest.approx(p.lambda1, abs=1e-12)
    assert s.flagged == ()


def test_uncorrected_offer_share_is_raw_hire_share():
    p = random_economy(6, seed=4)
    flows, vals = exact_flows(p)
    s = estimate_search_params(flows, true_scaled(p, vals), corrected_f=False)
    np.testing.assert_allclose(s.f, flows.ne / flows.ne.sum(), atol=1e-15)


def test_zero_relocation_economy():
    p = random_economy(10, seed=5, rho_max=0.0)
    flows, vals = exact_flows(p)
    je = joint_estimate(flows)
    np.testing.assert_allclose(je.search.rho, 0.0, atol=1e-8)
    np.testing.assert_allclose(je.sigmaV, true_scaled(p, vals), atol=1e-8)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_joint_estimate_exact_recovery(seed):
    p = random_economy(20, seed=seed, sigma=1.5)
    flows, vals = exact_flows(p)
    je = joint_estimate(flows)
    np.testing.assert_allclose(je.sigmaV, true_scaled(p, vals), atol=1e-8)
    np.testing.assert_allclose(je.search.f, p.f, atol=1e-10)
    np.testing.assert_allclose(je.search.delta, p.delta, atol=1e-8)
    np.testing.assert_allclose(je.search.rho, p.rho, atol=1e-8)
    assert je.search.lambda0 == pytest.approx(p.lambda0, abs=1e-8)
    assert je.search.lambda1 == pytest.approx(p.lambda1, abs=1e-8)
    assert je.trace[-1]["balance_gap"] < 1e-8


def test_joint_estimate_trace_objective_non_increasing():
    p = random_economy(12, seed=8)
    flows, _ = exact_flows(p, mass=3e3)
    # perturb the flows so the fit is not perfect and shrinkage rounds run
    g = np.random.default_rng(0)
    ee = flows.ee_dense() * g.uniform(0.8, 1.2, (12, 12))
    noisy = FlowMatrices.from_dense(ee, flows.en * g.uniform(0.8, 1.2, 12), flows.ne, flows.L, flows.L_N)
    je = joint_estimate(noisy)
    steps = [t for t in je.trace if "objective" in t]
    for a, b in zip(steps, steps[1:]):
        if a["round"] == b["round"]:
            assert b["objective"] <= a["objective"] + 1e-9 * abs(a["objective"])
    assert any(t.get("round") == "probe" and "dispersion" in t for t in je.trace)


def test_estimates_invariant_to_flow_scale():
    p = random_economy(10, seed=9)
    flows, _ = exact_flows(p)
    a, b = joint_estimate(flows), joint_estimate(flows.scaled(7.0))
    np.testing.assert_allclose(a.sigmaV, b.sigmaV, atol=1e-9)
    np.testing.assert_allclose(a.search.delta, b.search.delta, atol=1e-9)


def test_outer_iteration_fixed_point_at_truth():
    p = random_economy(8, seed=10)
    flows, vals = exact_flows(p)
    v = true_scaled(p, vals)
    v_next, _ = outer_iteration(flows, v)
    np.testing.assert_allclose(v_next, v, atol=1e-10)


def test_employer_without_hires_is_not_identified():
    p = random_economy(5, seed=11)
    flows, vals = exact_flows(p)
    ne = flows.ne.copy()
    ne[2] = 0.0
    bad = FlowMatrices(flows.ee, flows.en, ne, flows.L, flows.L_N, flows.ids)
    with pytest.raises(IdentificationError, match="non-employment"):
        estimate_search_params(bad, true_scaled(p, vals))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.3, 4.0))
def test_calibration_equalises_variances(seed, sigma):
    p = random_economy(12, seed=seed, sigma=sigma)
    flows, vals = exact_flows(p)
    g = np.random.default_rng(seed)
    psi = g.normal(size=12)
    w = flows.L
    d = calibrate_sigma_and_decompose(true_scaled(p, vals), 0.0, true_search(p), psi, w)
    _, var_u = weighted_moments(d.u, w)
    _, var_psi = weighted_moments(psi, w)
    assert abs(var_u - var_psi) < 1e-10
    np.testing.assert_allclose(d.a, d.u - psi, atol=1e-14)
    assert weighted_moments(d.u, w)[0] == pytest.approx(0.0, abs=1e-12)


def test_calibration_recovers_sigma_when_pay_is_utility():
    # with a = 0 and a centered pay vector the calibrated scale is the true one
    J = 10
    p0 = random_economy(J, seed=12, sigma=2.5)
    from jobvalues.model import EconomyParams
    p = EconomyParams(psi=p0.psi, a=np.zeros(J), delta=p0.delta, rho=p0.rho, f=p0.f,
                      lambda0=p0.lambda0, lambda1=p0.lambda1, sigma=2.5, u_N=-0.2)
    flows, vals = exact_flows(p)
    psi = p.psi - weighted_moments(p.psi, flows.L)[0]
    d = calibrate_sigma_and_decompose(true_scaled(p, vals), 0.0, true_search(p), psi, flows.L)
    assert d.sigma_hat == pytest.approx(2.5, rel=1e-9)
    np.testing.assert_allclose(d.a, 0.0, atol=1e-9)


def test_calibration_rejects_constant_pay():
    p = random_economy(5, seed=13)
    flows, vals = exact_flows(p)
    with pytest.raises(IdentificationError):
        calibrate_sigma_and_decompose(true_scaled(p, vals), 0.0, true_search(p), np.ones(5), flows.L)


def test_assembled_estimates_round_trip_frame():
    p = random_economy(6, seed=14)
    flows, vals = exact_flows(p)
    je = joint_estimate(flows)
    d = calibrate_sigma_and_decompose(je.sigmaV, 0.0, je.search, p.psi - p.psi.mean(), flows.L)
    est = assemble_estimates(je, p.psi - p.psi.mean(), d)
    back = EmployerEstimates.from_frame(est.to_frame(), est.sigma_hat, est.lambda0, est.lambda1)
    np.testing.assert_array_equal(back.V, est.V)
    np.testing.assert_allclose(est.a + est.psi, est.u, atol=1e-12)


def test_weighted_corr_matches_numpy_for_equal_weights():
    g = np.random.default_rng(0)
    x, y = g.normal(size=50), g.normal(size=50)
    assert weighted_corr(x, y, np.ones(50)) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)
    assert weighted_corr(x, np.ones(50), np.ones(50)) == 0.0
