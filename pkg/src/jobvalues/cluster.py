"""Employer grouping by weighted k-means on wage, flow and composition features."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ContractError
from .flows import NONEMP, FlowMatrices

logger = logging.getLogger(__name__)

N_CDF_POINTS = 10


def choose_g(J: int, divisor: int = 50) -> int:
    """Number of clusters: ``J / divisor`` rounded half-to-even, at least 1."""
    if J < 1:
        raise ContractError("J must be at least 1")
    if divisor < 1:
        raise ContractError("divisor must be a positive integer")
    return max(1, round(J / divisor))


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    objective: float
    history: list  # objective per Lloyd iteration, one list per restart
    best_run: int


def _sqdist(X, C):
    return np.maximum((X ** 2).sum(1)[:, None] - 2.0 * X @ C.T + (C ** 2).sum(1)[None, :], 0.0)


def _plus_plus(X, w, G, gen):
    """k-means++ seeding with sampling probability proportional to ``w * D^2``."""
    J = len(X)
    p = w / w.sum() if w.sum() > 0 else np.full(J, 1.0 / J)
    centers = [X[gen.choice(J, p=p)]]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for _ in range(1, G):
        score = w * d2
        if score.sum() <= 0:
            idx = gen.choice(J)
        else:
            idx = gen.choice(J, p=score / score.sum())
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(1))
    return np.array(centers)


def _centroids(X, w, labels, G, old):
    mass = np.bincount(labels, weights=w, minlength=G)
    C = np.empty((G, X.shape[1]))
    for k in range(X.shape[1]):
        C[:, k] = np.bincount(labels, weights=w * X[:, k], minlength=G)
    nz = mass > 0
    C[nz] /= mass[nz, None]
    C[~nz] = old[~nz]
    return C, mass


def _lloyd(X, w, G, C, max_iter):
    labels = np.argmin(_sqdist(X, C), axis=1)
    log = []
    for it in range(max_iter):
        C, mass = _centroids(X, w, labels, G, C)
        # empty (or weightless) clusters take the point farthest from its centroid
        for g in np.flatnonzero(mass <= 0):
            d = ((X - C[labels]) ** 2).sum(1) * np.where(w > 0, 1.0, 0.0)
            far = int(np.argmax(d))
            C[g] = X[far]
            labels[far] = g
            C, mass = _centroids(X, w, labels, G, C)
        obj = float(np.sum(w * ((X - C[labels]) ** 2).sum(1)))
        log.append(obj)
        new = np.argmin(_sqdist(X, C), axis=1)
        # keep current label on exact ties so the objective cannot rise
        d_new = ((X - C[new]) ** 2).sum(1)
        d_old = ((X - C[labels]) ** 2).sum(1)
        new = np.where(d_new < d_old, new, labels)
        if np.array_equal(new, labels):
            break
        labels = new
    C, _ = _centroids(X, w, labels, G, C)
    obj = float(np.sum(w * ((X - C[labels]) ** 2).sum(1)))
    if not log or obj < log[-1]:
        log.append(obj)
    return labels, C, obj, log


def canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel so clusters are numbered in order of first appearance."""
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    mapping = np.empty(labels.max() + 1, dtype=np.int64)
    mapping[np.unique(labels)[order]] = np.arange(len(order))
    return mapping[labels]


def kmeans(features, G: int, weights=None, seed: int = 0, n_init: int = 10, max_iter: int = 500) -> KMeansResult:
    """Weighted Lloyd k-means, best of ``n_init`` k-means++ restarts.

    Labels are canonicalised by order of first appearance.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    J = X.shape[0]
    if X.ndim != 2 or X.shape[1] < 1:
        raise ContractError("features must be a J x d matrix with d >= 1")
    if not 1 <= G <= J:
        raise ContractError(f"need 1 <= G <= J, got G={G}, J={J}")
    w = np.ones(J) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (J,) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ContractError("weights must be non-negative, one per row")
    if not np.all(np.isfinite(X)):
        raise ContractError("features must be finite")
    gen = np.random.default_rng(seed)
    best = None
    history = []
    for run in range(n_init):
        C0 = _plus_plus(X, w, G, gen)
        labels, C, obj, log = _lloyd(X, w, G, C0, max_iter)
        history.append(log)
        if best is None or obj < best[2] - 1e-12 * max(abs(best[2]), 1.0):
            best = (labels, C, obj, run)
    labels, C, obj, run = best
    present, first = np.unique(labels, return_index=True)
    # clusters left empty (possible only with zero weights) go last
    order = np.r_[present[np.argsort(first)], np.setdiff1d(np.arange(G), present)]
    return KMeansResult(canonical_labels(labels), C[order], obj, history, run)


def standardize(features: pd.DataFrame, weights, indicator_prefixes=("ind_", "occ_", "loc_")) -> pd.DataFrame:
    """Zero weighted mean and unit weighted variance for continuous columns;
    indicator/share columns are left as they are."""
    w = np.asarray(weights, dtype=float)
    out = features.copy().astype(float)
    for col in out.columns:
        if str(col).startswith(tuple(indicator_prefixes)):
            continue
        x = out[col].to_numpy()
        m = np.sum(w * x) / w.sum()
        sd = np.sqrt(np.sum(w * (x - m) ** 2) / w.sum())
        out[col] = (x - m) / sd if sd > 0 else x - m
    return out


def employer_features(panel: pd.DataFrame, flows: FlowMatrices, establishments: pd.DataFrame | None = None,
                      n_locations: int = 10) -> pd.DataFrame:
    """Clustering features per employer, indexed like ``flows.ids``.

    * ``cdf_1..cdf_10``: share of the employer's wage records at or below the
      overall wage quantiles 0.1, ..., 1.0;
    * ``jc_ee``, ``jd_ee``, ``jc_ne``, ``jd_ne``: hires and separations per
      worker through job-to-job and non-employment channels;
    * ``ind_*``, ``occ_*``, ``loc_*``: industry, occupation and location
      indicator shares (location cells top-coded at ``n_locations - 1``).
    """
    ids = flows.ids
    emp = panel[panel["employer_id"] != NONEMP]
    wages = emp["log_wage"].to_numpy(dtype=float)
    cuts = np.quantile(wages, np.arange(1, N_CDF_POINTS + 1) / N_CDF_POINTS)
    idx = pd.Index(ids)
    pos = idx.get_indexer(emp["employer_id"].to_numpy())
    keep = pos >= 0
    pos, wages = pos[keep], wages[keep]
    n = np.bincount(pos, minlength=len(ids)).astype(float)
    cols = {}
    for i, c in enumerate(cuts, start=1):
        cnt = np.bincount(pos, weights=(wages <= c).astype(float), minlength=len(ids))
        cols[f"cdf_{i}"] = np.divide(cnt, n, out=np.zeros_like(cnt), where=n > 0)
    L = np.where(flows.L > 0, flows.L, 1.0)
    ee = flows.ee
    cols["jc_ee"] = np.asarray(ee.sum(axis=0)).ravel() / L
    cols["jd_ee"] = np.asarray(ee.sum(axis=1)).ravel() / L
    cols["jc_ne"] = flows.ne / L
    cols["jd_ne"] = flows.en / L
    out = pd.DataFrame(cols, index=pd.Index(ids, name="establishment_id"))
    if "occupation" in emp.columns:
        occ = pd.crosstab(emp["employer_id"], emp["occupation"].astype(str).str[:2], normalize="index")
        occ.columns = [f"occ_{c}" for c in occ.columns]
        out = out.join(occ, how="left")
    if establishments is not None:
        est = establishments.set_index("establishment_id").reindex(ids)
        if "industry" in est:
            out = out.join(pd.get_dummies(est["industry"], prefix="ind", dtype=float).set_index(out.index))
        if "location" in est:
            loc = np.minimum(est["location"].to_numpy(), n_locations - 1)
            out = out.join(pd.get_dummies(pd.Series(loc, index=out.index), prefix="loc", dtype=float))
    return out.fillna(0.0)


def cluster_employers(features: pd.DataFrame, weights, G: int, seed: int = 0, n_init: int = 10,
                      max_iter: int = 500) -> tuple[pd.Series, KMeansResult]:
    """Standardise features, run k-means and return ``establishment_id -> cluster_id``."""
    X = standardize(features, weights)
    res = kmeans(X.to_numpy(), G, weights, seed=seed, n_init=n_init, max_iter=max_iter)
    return pd.Series(res.labels, index=features.index, name="cluster_id"), res


def apply_clusters(panel: pd.DataFrame, assignment: pd.Series) -> pd.DataFrame:
    """Panel with employer ids replaced by cluster ids.

    Records at employers without a cluster are dropped rather than recoded
    as non-employment.
    """
    emp = panel["employer_id"].to_numpy()
    mapped = panel["employer_id"].map(assignment)
    keep = (emp == NONEMP) | mapped.notna().to_numpy()
    out = panel.loc[keep].copy()
    out["employer_id"] = np.where(out["employer_id"].to_numpy() == NONEMP, NONEMP,
                                  mapped[keep].fillna(NONEMP).to_numpy()).astype(np.int64)
    return out
