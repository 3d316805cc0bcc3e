"""Counterfactual job-to-job flows when workers judge employers by values
predicted from limited information, and the resulting mobility aggregates."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import expit

from .analytics import value_on_attributes
from .errors import ContractError
from .estimate import EmployerEstimates

logger = logging.getLogger(__name__)

AGGREGATES = ("overall", "up_V", "down_V", "up_psi", "down_psi", "up_a", "down_a")
FULL_INFORMATION = "full_information"
BENCHMARK = "benchmark"


@dataclass(frozen=True)
class Scenario:
    name: str
    predicted: np.ndarray
    ids: np.ndarray
    description: str = ""

    def __post_init__(self):
        p = np.asarray(self.predicted, dtype=float)
        if not np.all(np.isfinite(p)):
            raise ContractError(f"scenario {self.name}: predicted values must be finite")
        object.__setattr__(self, "predicted", p)
        object.__setattr__(self, "ids", np.asarray(self.ids))


def counterfactual_flow_matrix(estimates: EmployerEstimates, scenario: Scenario, logistic: bool = False,
                               mean_tol: float = 1e-8) -> np.ndarray:
    """Job-to-job flows ``L_j [rho_j f_k + s_j lambda1 f_k P_jk]`` with the
    diagonal set to zero.

    ``P_jk`` is ``1{Vhat_k >= V_j}``, comparing the predicted destination
    value with the actual origin value; ``logistic=True`` replaces it by the
    logit choice probability at the estimated taste-shock scale.  The
    scenario must preserve the offer-weighted mean of the actual values.
    """
    if scenario.ids.shape != estimates.ids.shape or np.any(scenario.ids != estimates.ids):
        raise ContractError(f"scenario {scenario.name} is defined on a different cluster set")
    V, Vh, f = estimates.V, scenario.predicted, estimates.f
    gap = abs(float(f @ Vh - f @ V))
    if gap > mean_tol * max(1.0, float(np.abs(V).max())):
        raise ContractError(f"scenario {scenario.name}: offer-weighted mean differs from actual by {gap:.3g}")
    if logistic:
        P = expit(estimates.sigma_hat * (Vh[None, :] - V[:, None]))
    else:
        P = (Vh[None, :] >= V[:, None]).astype(float)
    M = estimates.L[:, None] * (estimates.rho[:, None] * f[None, :]
                                + (estimates.s * estimates.lambda1)[:, None] * f[None, :] * P)
    np.fill_diagonal(M, 0.0)
    return M


def mobility_aggregates(M, V, psi, a) -> dict:
    """Total flows and their split into moves towards employers at least as
    good (up) or worse (down) in overall value, pay and amenities."""
    M = np.asarray(M, dtype=float)
    out = {"overall": float(M.sum())}
    for name, x in (("V", V), ("psi", psi), ("a", a)):
        x = np.asarray(x, dtype=float)
        up = x[None, :] >= x[:, None]
        out[f"up_{name}"] = float(M[up].sum())
        out[f"down_{name}"] = float(M[~up].sum())
    return out


def relative_change(scenario: dict, benchmark: dict) -> dict:
    """Percentage change of each aggregate against the benchmark; ``None``
    where the benchmark is zero."""
    out = {}
    for k, b in benchmark.items():
        if b == 0:
            logger.warning("benchmark aggregate %s is zero; relative change undefined", k)
            out[k] = None
        else:
            out[k] = 100.0 * (scenario[k] - b) / b
    return out


def fitted_scenario(name: str, estimates: EmployerEstimates, regressors, controls=None,
                    description: str = "") -> Scenario:
    """Values predicted by an offer-weighted regression of the actual values
    on the given regressors (with an intercept, so the weighted mean is kept)."""
    fit = value_on_attributes(estimates.V, regressors, controls, weights=estimates.f)
    return Scenario(name, fit.fitted, estimates.ids, description)


def build_scenarios(estimates: EmployerEstimates, shares: pd.DataFrame, controls: pd.DataFrame | None,
                    definitions: dict) -> list[Scenario]:
    """Scenarios from ``name -> list of regressor columns``.

    The benchmark uses the controls alone; the full-information scenario
    uses the actual values.  Other scenarios add their columns of ``shares``
    to the controls.
    """
    out = []
    if controls is not None and controls.shape[1]:
        out.append(fitted_scenario(BENCHMARK, estimates, None, controls, "controls only"))
    else:
        out.append(Scenario(BENCHMARK, np.full(estimates.J, float(estimates.f @ estimates.V)), estimates.ids,
                            "offer-weighted mean value"))
    for name, cols in definitions.items():
        if name in (BENCHMARK, FULL_INFORMATION):
            raise ContractError(f"scenario name {name!r} is reserved")
        missing = sorted(set(cols) - set(shares.columns))
        if missing:
            raise ContractError(f"scenario {name}: unknown regressors {missing}")
        out.append(fitted_scenario(name, estimates, shares[list(cols)], controls, ", ".join(cols)))
    out.append(Scenario(FULL_INFORMATION, estimates.V, estimates.ids, "actual values"))
    return out


def scenario_table(estimates: EmployerEstimates, scenarios: list[Scenario], logistic: bool = False) -> pd.DataFrame:
    """One row per scenario: aggregate flows and percentage changes against
    the benchmark (the first scenario)."""
    rows = []
    base = None
    for sc in scenarios:
        agg = mobility_aggregates(counterfactual_flow_matrix(estimates, sc, logistic), estimates.V,
                                  estimates.psi, estimates.a)
        base = agg if base is None else base
        rel = relative_change(agg, base)
        row = {"scenario": sc.name}
        row.update(agg)
        row.update({f"pct_{k}": v for k, v in rel.items()})
        rows.append(row)
    return pd.DataFrame(rows)
