"""Two-way fixed-effects log-wage regression (worker and employer-cluster effects)."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import lsqr

from .errors import DataError, IdentificationError, NumericalError
from .flows import NONEMP

logger = logging.getLogger(__name__)

AGE_CENTER = 40.0


@dataclass(frozen=True)
class AKMResult:
    psi: pd.Series
    alpha: pd.Series
    beta_x: pd.Series
    residuals: np.ndarray
    n_obs: int
    iterations: int
    residual_norm: float


def _covariates(df: pd.DataFrame) -> pd.DataFrame:
    """Year-by-education dummies (first observed year per education dropped)
    and education-specific cubic age terms without the linear term."""
    cols = {}
    age = df["age"].to_numpy(dtype=float) - AGE_CENTER
    edu = df["education"].to_numpy()
    per = df["period"].to_numpy()
    for e in np.unique(edu):
        m = edu == e
        years = np.unique(per[m])
        for t in years[1:]:
            cols[f"year{t}_edu{e}"] = (m & (per == t)).astype(float)
        cols[f"age2_edu{e}"] = np.where(m, age ** 2, 0.0)
        cols[f"age3_edu{e}"] = np.where(m, age ** 3, 0.0)
    return pd.DataFrame(cols, index=df.index)


def _demean(X, groups, n_groups):
    """Subtract group means column-wise (dense or 1-D)."""
    counts = np.bincount(groups, minlength=n_groups).astype(float)
    if X.ndim == 1:
        return X - (np.bincount(groups, X, n_groups) / counts)[groups]
    out = np.empty_like(X)
    for c in range(X.shape[1]):
        out[:, c] = X[:, c] - (np.bincount(groups, X[:, c], n_groups) / counts)[groups]
    return out


def akm_fit(panel: pd.DataFrame, cluster_of, tol: float = 1e-10, iter_lim: int = 100_000) -> AKMResult:
    """Fit ``log w = alpha_worker + psi_cluster + x'beta + e`` by least squares.

    ``cluster_of`` maps employer ids to cluster ids (dict or Series); records
    at unmapped employers are dropped.  Worker effects are swept out by
    within-worker demeaning and the remaining sparse problem is solved with
    LSQR on a column-scaled design.  ``psi`` is normalised to a worker-year
    weighted mean of zero, with the constant moved into ``alpha``.
    """
    df = panel[panel["employer_id"] != NONEMP]
    df = df[df["log_wage"].notna()]
    cmap = pd.Series(cluster_of)
    df = df.assign(cluster=df["employer_id"].map(cmap)).dropna(subset=["cluster"])
    if df.empty:
        raise DataError("no employed records with a cluster assignment")
    df = df.reset_index(drop=True)
    workers, widx = np.unique(df["worker_id"].to_numpy(), return_inverse=True)
    clusters, gidx = np.unique(df["cluster"].to_numpy(), return_inverse=True)
    n, W, G = len(df), len(workers), len(clusters)

    bip = sp.coo_matrix((np.ones(n), (widx, W + gidx)), shape=(W + G, W + G))
    n_comp, lab = connected_components(bip, directed=False)
    if n_comp > 1:
        sizes = np.bincount(lab[W:], minlength=n_comp)
        parts = [clusters[lab[W:] == c][:10].tolist() for c in np.argsort(-sizes)[:5] if sizes[c] > 0]
        raise IdentificationError(
            f"worker-cluster graph has {n_comp} connected components; cluster groups (first ids): {parts}"
        )

    X = _covariates(df)
    names = list(X.columns)
    y = df["log_wage"].to_numpy(dtype=float)
    D = sp.csr_matrix((np.ones(n), (np.arange(n), gidx)), shape=(n, G))[:, 1:]
    # within-worker transform of the cluster dummies stays sparse: only the
    # clusters a worker visited get non-zero entries
    counts = np.bincount(widx, minlength=W).astype(float)
    Wm = sp.csr_matrix((1.0 / counts[widx], (widx, np.arange(n))), shape=(W, n))
    Dt = (D - sp.csr_matrix((np.ones(n), (np.arange(n), widx)), shape=(n, W)) @ (Wm @ D)).tocsc()
    Xt = _demean(X.to_numpy(), widx, W) if names else np.zeros((n, 0))
    yt = _demean(y, widx, W)
    Z = sp.hstack([Dt, sp.csc_matrix(Xt)]).tocsc()
    norms = np.sqrt(np.asarray(Z.multiply(Z).sum(axis=0)).ravel())
    if np.any(norms == 0):
        zero = np.flatnonzero(norms == 0)
        labels = [f"cluster {clusters[1 + i]}" if i < G - 1 else names[i - G + 1] for i in zero[:10]]
        raise IdentificationError(f"regressors with no within-worker variation: {labels}")
    Zs = Z @ sp.diags(1.0 / norms)
    sol = lsqr(Zs, yt, atol=tol * 1e-4, btol=tol * 1e-4, iter_lim=iter_lim)
    coef, istop, itn = sol[0] / norms, sol[1], sol[2]
    if istop in (7,):
        raise NumericalError("LSQR hit its iteration limit", residual=float(sol[3]))
    # polish with a few refinement passes so normal equations hold tightly
    for _ in range(3):
        r = yt - Z @ coef
        corr = lsqr(Zs, r, atol=1e-14, btol=1e-14, iter_lim=iter_lim)[0] / norms
        coef = coef + corr
    psi_g = np.r_[0.0, coef[: G - 1]]
    beta = coef[G - 1:]
    xb = X.to_numpy() @ beta if names else np.zeros(n)
    alpha = np.bincount(widx, y - psi_g[gidx] - xb, W) / counts
    shift = psi_g[gidx].mean()
    psi_g = psi_g - shift
    alpha = alpha + shift
    resid = y - alpha[widx] - psi_g[gidx] - xb
    grad = np.abs(Z.T @ (yt - Z @ coef)).max(initial=0.0) / max(np.abs(yt).max(), 1.0)
    logger.debug("akm: %d iterations, normal-equation residual %.3g", itn, grad)
    return AKMResult(
        psi=pd.Series(psi_g, index=pd.Index(clusters, name="cluster_id"), name="psi"),
        alpha=pd.Series(alpha, index=pd.Index(workers, name="worker_id"), name="alpha"),
        beta_x=pd.Series(beta, index=names, name="beta_x", dtype=float),
        residuals=resid, n_obs=n, iterations=int(itn), residual_norm=float(grad),
    )
