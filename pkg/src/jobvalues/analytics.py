"""Regression layer: weighted least squares with robust errors, adjusted and
partial R², logistic regression, attribute/value regressions, greedy forward
selection, vacancy-duration regressions and the ad-to-hire linker."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg as sla

from .errors import ContractError, DataError, NumericalError

logger = logging.getLogger(__name__)

INTERCEPT = "const"
MIN_DURATION, MAX_DURATION = 1, 90


@dataclass(frozen=True)
class RegressionResult:
    names: list
    coef: np.ndarray
    se: np.ndarray
    ssr: float
    tss: float
    n: int
    k: int
    r2: float
    adjusted_r2: float
    fitted: np.ndarray = field(repr=False)
    residuals: np.ndarray = field(repr=False)

    @property
    def df_res(self) -> int:
        return self.n - self.k

    @property
    def df_total(self) -> int:
        return self.n - 1

    def params(self) -> pd.Series:
        return pd.Series(self.coef, index=self.names)

    def table(self, model: str = "") -> pd.DataFrame:
        return pd.DataFrame({"model": model, "term": self.names, "estimate": self.coef, "se": self.se,
                             "r2": self.r2, "adjusted_r2": self.adjusted_r2, "n": self.n})


def _design(X, add_intercept: bool, n: int):
    if X is None:
        M, names = np.zeros((n, 0)), []
    elif isinstance(X, pd.DataFrame):
        M, names = X.to_numpy(dtype=float), [str(c) for c in X.columns]
    elif isinstance(X, pd.Series):
        M, names = X.to_numpy(dtype=float)[:, None], [str(X.name)]
    else:
        M = np.asarray(X, dtype=float)
        M = M[:, None] if M.ndim == 1 else M
        names = [f"x{i}" for i in range(M.shape[1])]
    if M.shape[0] != n:
        raise ContractError(f"design has {M.shape[0]} rows, outcome has {n}")
    if add_intercept:
        M = np.column_stack([np.ones(n), M])
        names = [INTERCEPT] + names
    return M, names


def _weights(weights, n):
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).ravel()
    if w.shape != (n,):
        raise ContractError("weights must have one entry per observation")
    if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise ContractError("weights must be non-negative, finite and not all zero")
    return w


def _collinear(M, names, w):
    """Names of columns that are linear combinations of earlier ones."""
    A = M * np.sqrt(w)[:, None]
    scale = np.linalg.norm(A, axis=0)
    scale[scale == 0] = 1.0
    A = A / scale
    tol = max(A.shape) * np.finfo(float).eps * 1e2
    bad, kept = [], []
    for j in range(A.shape[1]):
        trial = kept + [j]
        s = np.linalg.svd(A[:, trial], compute_uv=False)
        if s[-1] <= tol * s[0] or np.linalg.norm(A[:, j]) == 0:
            bad.append(names[j])
        else:
            kept.append(j)
    return bad


def wols(y, X=None, weights=None, add_intercept: bool = True) -> RegressionResult:
    """Weighted least squares with HC1 standard errors.

    R² is measured against the weighted mean (the intercept-only model) and
    the adjusted version uses ``df_res = n - k`` and ``df_total = n - 1``,
    where ``n`` counts observations with positive weight.
    """
    yv = np.asarray(y, dtype=float).ravel()
    n_all = yv.size
    w = _weights(weights, n_all)
    M, names = _design(X, add_intercept, n_all)
    if not (np.all(np.isfinite(yv)) and np.all(np.isfinite(M))):
        raise DataError("regression inputs contain non-finite values")
    k = M.shape[1]
    n = int(np.count_nonzero(w))
    if k == 0:
        raise ContractError("empty design")
    if k >= n:
        raise ContractError(f"need more observations ({n}) than regressors ({k})")
    sw = np.sqrt(w)
    A = M * sw[:, None]
    Q, R, piv = sla.qr(A, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if d.size and d[-1] <= d[0] * max(A.shape) * np.finfo(float).eps * 1e2:
        raise ContractError(f"rank-deficient design; collinear columns: {_collinear(M, names, w)}")
    b = np.empty(k)
    b[piv] = sla.solve_triangular(R, Q.T @ (yv * sw))
    fitted = M @ b
    e = yv - fitted
    ssr = float(np.sum(w * e * e))
    ybar = np.sum(w * yv) / w.sum()
    tss = float(np.sum(w * (yv - ybar) ** 2))
    if tss > 0:
        r2 = 1.0 - ssr / tss
        adj = 1.0 - (ssr / (n - k)) / (tss / (n - 1))
    else:
        r2 = adj = 1.0 if ssr == 0 else 0.0
    if k == 1 and add_intercept:
        r2 = adj = 0.0
    Rinv = sla.solve_triangular(R, np.eye(k))
    bread = np.empty((k, k))
    bread[np.ix_(piv, piv)] = Rinv @ Rinv.T
    meat_rows = M * (w * e)[:, None]
    cov = bread @ (meat_rows.T @ meat_rows) @ bread * (n / (n - k))
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return RegressionResult(names, b, se, ssr, tss, n, k, float(r2), float(adj), fitted, e)


def partial_r2(y, X_attrs, X_controls=None, weights=None) -> float | None:
    """Share of the variation left by the controls that the attributes explain,
    on adjusted R²; ``None`` when the controls fit perfectly."""
    full_X = X_attrs if X_controls is None else pd.concat(
        [pd.DataFrame(X_controls).reset_index(drop=True), pd.DataFrame(X_attrs).reset_index(drop=True)], axis=1)
    full = wols(y, full_X, weights)
    base = wols(y, X_controls, weights)
    if base.adjusted_r2 >= 1.0:
        logger.warning("baseline model fits perfectly; partial R² undefined")
        return None
    return (full.adjusted_r2 - base.adjusted_r2) / (1.0 - base.adjusted_r2)


# ---------------------------------------------------------------------------
# logit


@dataclass(frozen=True)
class LogitResult:
    names: list
    coef: np.ndarray
    loglik: float
    loglik_null: float
    pseudo_r2: float
    iterations: int
    gradient_norm: float
    trace: list = field(default_factory=list, repr=False)


class SeparationError(NumericalError):
    """Outcome perfectly predicted by a combination of regressors."""


def _loglik(y, eta, w):
    # log p = -log(1+e^-eta), log(1-p) = -log(1+e^eta)
    return float(np.sum(w * (y * -np.logaddexp(0, -eta) + (1 - y) * -np.logaddexp(0, eta))))


def logit_fit(y, X=None, weights=None, add_intercept: bool = True, tol: float = 1e-8,
              max_iter: int = 200, eta_limit: float = 30.0) -> LogitResult:
    """Weighted logistic regression by Newton/IRLS.

    Converges when the gradient of the weight-normalised log-likelihood
    has norm below ``tol``.  A linear index beyond ``eta_limit`` in absolute
    value means fitted probabilities have collapsed to 0 or 1, which is
    reported as separation.
    """
    yv = np.asarray(y, dtype=float).ravel()
    n = yv.size
    if not np.all((yv == 0) | (yv == 1)):
        raise ContractError("logit outcome must be 0/1")
    w = _weights(weights, n)
    M, names = _design(X, add_intercept, n)
    W = w.sum()
    ybar = float(np.sum(w * yv) / W)
    if ybar in (0.0, 1.0):
        raise SeparationError("outcome has no variation", residual=float("nan"))
    ll_null = float(W * (ybar * np.log(ybar) + (1 - ybar) * np.log1p(-ybar)))
    if _collinear(M, names, w):
        raise ContractError(f"rank-deficient design; collinear columns: {_collinear(M, names, w)}")
    b = np.zeros(M.shape[1])
    if add_intercept:
        b[0] = np.log(ybar / (1 - ybar))
    trace = []
    for it in range(1, max_iter + 1):
        eta = M @ b
        p = 0.5 * (1 + np.tanh(0.5 * eta))
        g = M.T @ (w * (yv - p))
        gn = float(np.linalg.norm(g) / W)
        trace.append({"iteration": it, "loglik": _loglik(yv, eta, w), "gradient_norm": gn})
        if gn < tol:
            break
        H = (M * (w * p * (1 - p))[:, None]).T @ M
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError as exc:
            raise SeparationError("singular information matrix", residual=gn, trace=trace) from exc
        b = b + step
        if np.max(np.abs(M @ b)) > eta_limit:
            raise SeparationError("fitted probabilities collapsed to 0/1 (perfect separation)",
                                  residual=gn, trace=trace)
    else:
        raise NumericalError(f"logit did not converge in {max_iter} iterations", residual=gn, trace=trace)
    if M.shape[1] == int(add_intercept):
        ll, r2 = ll_null, 0.0
    else:
        ll = _loglik(yv, M @ b, w)
        r2 = 1.0 - ll / ll_null
    return LogitResult(names, b, ll, ll_null, float(r2), it, gn, trace)


def cell_dummies(frame: pd.DataFrame, columns, min_cell: int = 5, weights=None) -> pd.DataFrame:
    """Dummies for the cells formed by ``columns``; cells with fewer than
    ``min_cell`` rows are pooled into one residual cell.  The largest cell
    is the omitted reference."""
    key = frame[list(columns)].astype(str).agg("|".join, axis=1)
    size = key.value_counts()
    small = size.index[size < min_cell]
    key = key.where(~key.isin(small), "__pooled__")
    size = key.value_counts()
    ref = sorted(size.index[size == size.max()])[0]
    levels = sorted(set(key) - {ref})
    return pd.DataFrame({f"cell_{lv}": (key == lv).astype(float).to_numpy() for lv in levels}, index=frame.index)


# ---------------------------------------------------------------------------
# attribute / value regressions


def standardize_weighted(x, weights) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    w = _weights(weights, x.size)
    m = np.sum(w * x) / w.sum()
    sd = np.sqrt(np.sum(w * (x - m) ** 2) / w.sum())
    if not sd > 0:
        raise ContractError("cannot standardize a constant value")
    return (x - m) / sd


def _concat(*blocks) -> pd.DataFrame | None:
    parts = [pd.DataFrame(b).reset_index(drop=True) for b in blocks if b is not None and np.size(b)]
    return pd.concat(parts, axis=1) if parts else None


def attribute_on_value(shares: pd.DataFrame, value, controls=None, weights=None, value_name: str = "value") -> pd.DataFrame:
    """Regress each attribute share on the standardized value (plus controls).

    The slope is the change in the share of ads mentioning the attribute per
    one weighted standard deviation of the value.
    """
    z = pd.Series(standardize_weighted(value, weights), name=value_name)
    X = _concat(z, controls)
    rows = []
    for col in shares.columns:
        res = wols(shares[col].to_numpy(dtype=float), X, weights)
        i = res.names.index(value_name)
        rows.append({"attribute": col, "coef": res.coef[i], "se": res.se[i], "r2": res.r2,
                     "adjusted_r2": res.adjusted_r2, "n": res.n})
    return pd.DataFrame(rows)


@dataclass(frozen=True)
class ValueFit:
    result: RegressionResult
    partial_r2: float | None
    fitted: np.ndarray


def value_on_attributes(value, regressors, controls=None, weights=None) -> ValueFit:
    """Regress a value (or one of its components) on advertised content.

    With controls, also reports the partial R² of the regressors.
    """
    y = np.asarray(value, dtype=float)
    res = wols(y, _concat(controls, regressors), weights)
    pr2 = partial_r2(y, regressors, controls, weights) if controls is not None else res.adjusted_r2
    return ValueFit(res, pr2, res.fitted)


@dataclass(frozen=True)
class SelectionPath:
    order: list
    adjusted_r2: list
    stopped_early: bool


def forward_selection(value, candidates: pd.DataFrame, controls=None, weights=None, steps: int | None = None) -> SelectionPath:
    """Greedy forward selection on adjusted R².

    ``adjusted_r2[0]`` is the baseline (controls only).  Each step adds the
    candidate with the largest adjusted R², ties to the earlier column; the
    search stops early once no candidate raises adjusted R².
    """
    cols = list(candidates.columns)
    steps = len(cols) if steps is None else int(steps)
    if not 0 <= steps <= len(cols):
        raise ContractError("steps must lie between 0 and the number of candidates")
    y = np.asarray(value, dtype=float)
    path = [wols(y, controls, weights).adjusted_r2]
    chosen: list = []
    stopped = False
    for _ in range(steps):
        best, best_r2 = None, -np.inf
        for c in cols:
            if c in chosen:
                continue
            try:
                r2 = wols(y, _concat(controls, candidates[chosen + [c]]), weights).adjusted_r2
            except ContractError:
                continue
            if r2 > best_r2:
                best, best_r2 = c, r2
        if best is None or best_r2 <= path[-1]:
            stopped = True
            break
        chosen.append(best)
        path.append(best_r2)
    return SelectionPath(chosen, path, stopped)


# ---------------------------------------------------------------------------
# vacancy durations and ad-to-hire linking


def ad_durations(ads: pd.DataFrame) -> tuple[pd.Series, int]:
    """Days from posting to unlisting clamped to [1, 90]; ads without an
    unlisting date are dropped and counted."""
    has = ads["unlisted_date"].notna() & (ads["unlisted_date"].astype(str) != "")
    dropped = int((~has).sum())
    if dropped:
        logger.info("%d ads without unlisting date dropped", dropped)
    a = ads[has]
    days = (pd.to_datetime(a["unlisted_date"]) - pd.to_datetime(a["posted_date"])).dt.days
    return days.clip(MIN_DURATION, MAX_DURATION).rename("duration"), dropped


def duration_regression(ads: pd.DataFrame, cluster_of_ad, posted_values: pd.DataFrame, controls=None,
                        weights=None) -> tuple[RegressionResult, int]:
    """Log of the cluster-mean vacancy duration on standardized posted values.

    ``posted_values`` and ``controls`` are indexed by cluster; ``cluster_of_ad``
    maps ``ads.index`` to clusters.
    """
    dur, dropped = ad_durations(ads)
    cl = pd.Series(cluster_of_ad, index=ads.index).loc[dur.index]
    mean_dur = dur.groupby(cl.to_numpy()).mean()
    idx = posted_values.index.intersection(mean_dur.index)
    if len(idx) == 0:
        raise DataError("no cluster has both posted values and ad durations")
    w = None if weights is None else pd.Series(weights, index=posted_values.index).loc[idx].to_numpy()
    X = pd.DataFrame({c: standardize_weighted(posted_values.loc[idx, c], w) for c in posted_values.columns})
    ctrl = None if controls is None else controls.loc[idx]
    return wols(np.log(mean_dur.loc[idx].to_numpy()), _concat(X, ctrl), w), dropped


def hires_from_panel(panel: pd.DataFrame, base_date: str = "2010-01-01", days_per_period: int = 365) -> pd.DataFrame:
    """Spells that start in the panel: a worker's employer changes from one
    period to the next (including from non-employment)."""
    from .flows import NONEMP

    p = panel.sort_values(["worker_id", "period"], kind="mergesort")
    prev = p.groupby("worker_id")["employer_id"].shift()
    new = p["employer_id"].ne(prev) & prev.notna() & (p["employer_id"] != NONEMP)
    h = p.loc[new, ["worker_id", "employer_id", "period", "spell_start_day", "occupation"]]
    start = (np.datetime64(base_date) + (h["period"].to_numpy() * days_per_period).astype("timedelta64[D]")
             + (h["spell_start_day"].to_numpy() - 1).astype("timedelta64[D]"))
    return pd.DataFrame({"worker_id": h["worker_id"].to_numpy(), "establishment_id": h["employer_id"].to_numpy(),
                         "start_date": start, "occupation": h["occupation"].astype(str).to_numpy()})


def _occupation_distance(a: str, b: str) -> int | None:
    if a and a == b:
        return 0
    if len(a) >= 2 and a[:2] == b[:2]:
        return 1
    return None


def link_ads_to_hires(ads: pd.DataFrame, hires: pd.DataFrame, window_days: int = 183) -> pd.DataFrame:
    """Attach at most one hire to each ad and each hire to at most one ad.

    A candidate starts within ``(posted, posted + window]`` at the same
    establishment in the same 4-digit occupation or, failing that, the same
    2-digit group.  Ads are served in order of posting date then id; each
    takes its earliest available candidate, ties going to the closer
    occupation and then the lower worker id.
    """
    posted = pd.to_datetime(ads["posted_date"]).to_numpy()
    order = np.lexsort((ads["ad_id"].to_numpy(), posted))
    h = hires.reset_index(drop=True)
    h_start = pd.to_datetime(h["start_date"]).to_numpy()
    by_est = {k: g.index.to_numpy() for k, g in h.groupby("establishment_id")}
    taken = np.zeros(len(h), dtype=bool)
    window = np.timedelta64(int(window_days), "D")
    rows = []
    for i in order:
        ad = ads.iloc[i]
        best = None
        for r in by_est.get(ad["establishment_id"], ()):
            if taken[r] or not (posted[i] < h_start[r] <= posted[i] + window):
                continue
            dist = _occupation_distance(str(ad["occupation"]), str(h.at[r, "occupation"]))
            if dist is None:
                continue
            key = (h_start[r], dist, h.at[r, "worker_id"])
            if best is None or key < best[0]:
                best = (key, r)
        if best is None:
            rows.append({"ad_id": ad["ad_id"], "worker_id": None, "start_date": None})
        else:
            r = best[1]
            taken[r] = True
            rows.append({"ad_id": ad["ad_id"], "worker_id": int(h.at[r, "worker_id"]),
                         "start_date": str(pd.Timestamp(h_start[r]).date())})
    out = pd.DataFrame(rows, columns=["ad_id", "worker_id", "start_date"]).sort_values("ad_id", kind="mergesort")
    logger.info("%d of %d ads linked to a hire", out["worker_id"].notna().sum(), len(out))
    return out.reset_index(drop=True)
