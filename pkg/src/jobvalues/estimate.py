"""Recover employer values and search parameters from flows and wages.

Flow identification works with ``S_j = exp(sigma * V_j)`` normalised so that
non-employment has ``S_N = 1``.  Everything here lives in that scaled space
until :func:`calibrate_sigma_and_decompose` sets the taste-shock scale from
the wage regression.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .errors import ContractError, IdentificationError, NumericalError
from .flows import FlowMatrices, tarjan_scc
from .model import DEFAULT_BETA, EconomyParams, ValueVector, accept_log, invert_flow_utility

logger = logging.getLogger(__name__)

_BOX_MAX = 1.0 - 1e-6
_PIN_AFTER = 3


@dataclass(frozen=True)
class SearchParams:
    f: np.ndarray
    delta: np.ndarray
    rho: np.ndarray
    lambda0: float
    lambda1: float
    flagged: tuple = ()

    @property
    def s(self) -> np.ndarray:
        return 1.0 - self.delta - self.rho

    def as_params(self, beta: float = DEFAULT_BETA) -> EconomyParams:
        """Scaled-space economy (``sigma = 1``; pay and amenity left at zero)."""
        J = len(self.f)
        return EconomyParams(
            psi=np.zeros(J), a=np.zeros(J), delta=self.delta, rho=self.rho, f=self.f / self.f.sum(),
            lambda0=self.lambda0, lambda1=self.lambda1, beta=beta, sigma=1.0,
        )


@dataclass
class JointEstimate:
    sigmaV: np.ndarray
    sigmaV_N: float
    search: SearchParams
    L: np.ndarray
    L_N: float
    ids: np.ndarray
    trace: list = field(default_factory=list)


@dataclass(frozen=True)
class EmployerEstimates:
    """Everything estimated for one sample, one entry per employer cluster."""

    ids: np.ndarray
    sigmaV: np.ndarray
    sigmaV_N: float
    psi: np.ndarray
    u_scaled: np.ndarray
    sigma_hat: float
    a: np.ndarray
    s: np.ndarray
    f: np.ndarray
    delta: np.ndarray
    rho: np.ndarray
    lambda0: float
    lambda1: float
    L: np.ndarray

    def __post_init__(self):
        gap = np.max(np.abs(self.a + self.psi - self.u_scaled / self.sigma_hat), initial=0.0)
        if gap > 1e-10:
            raise ContractError(f"a + psi differs from u / sigma by {gap:.3g}")

    @property
    def J(self) -> int:
        return len(self.ids)

    @property
    def V(self) -> np.ndarray:
        """Employer values in utils, relative to non-employment."""
        return (self.sigmaV - self.sigmaV_N) / self.sigma_hat

    @property
    def u(self) -> np.ndarray:
        return self.u_scaled / self.sigma_hat

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "cluster_id": self.ids, "sigmaV": self.sigmaV, "V": self.V, "psi": self.psi,
            "a": self.a, "u": self.u, "u_scaled": self.u_scaled, "s": self.s, "f": self.f,
            "delta": self.delta, "rho": self.rho, "L": self.L,
        })

    def scalars(self) -> dict:
        return {"sigma_hat": self.sigma_hat, "lambda0": self.lambda0, "lambda1": self.lambda1,
                "sigmaV_N": self.sigmaV_N}

    @classmethod
    def from_frame(cls, df: pd.DataFrame, sigma_hat: float, lambda0: float, lambda1: float,
                   sigmaV_N: float = 0.0) -> "EmployerEstimates":
        col = lambda c: df[c].to_numpy(dtype=float)  # noqa: E731
        return cls(
            ids=df["cluster_id"].to_numpy(), sigmaV=col("sigmaV"), sigmaV_N=sigmaV_N, psi=col("psi"),
            u_scaled=col("u_scaled"), sigma_hat=sigma_hat, a=col("a"), s=col("s"), f=col("f"),
            delta=col("delta"), rho=col("rho"), lambda0=lambda0, lambda1=lambda1, L=col("L"),
        )


# ---------------------------------------------------------------------------
# voluntary-flow balance


def _voluntary_system(flows: FlowMatrices, search: SearchParams):
    """Voluntary flows ``F`` and offer masses ``kappa`` on employers + N (last)."""
    J = flows.J
    L, f, s = flows.L, search.f, search.s
    M = flows.ee_dense()
    F = np.zeros((J + 1, J + 1))
    K = np.zeros((J + 1, J + 1))
    F[:J, :J] = np.clip(M - (L * search.rho)[:, None] * f[None, :], 0.0, None)
    K[:J, :J] = (L * s * search.lambda1)[:, None] * f[None, :]
    F[:J, J] = np.clip(flows.en - L * search.delta, 0.0, None)
    K[:J, J] = L * s * (1.0 - search.lambda1)
    F[J, :J] = flows.ne
    K[J, :J] = flows.L_N * search.lambda0 * f
    np.fill_diagonal(F, 0.0)
    np.fill_diagonal(K, 0.0)
    return F, K


def voluntary_value_fixed_point(flows: FlowMatrices, search: SearchParams, tol=1e-12, max_iter=100_000,
                                init=None):
    """Scaled values that rationalise voluntary flows given search parameters.

    Voluntary flows satisfy ``F_od = kappa_od * S_d / (S_o + S_d)`` where
    ``kappa_od`` is the mass of ``d``-offers reaching ``o``.  With acceptance
    rates ``a_od = F_od / kappa_od`` every pair obeys ``a_od S_o = a_do S_d``,
    hence ``S_d = sum_o a_od S_o / sum_o a_do``.  The positive solution is the
    Perron vector of that non-negative map, found by power iteration with
    ``S_N = 1``.  Returns ``(sigmaV, sigmaV_N)`` with ``sigmaV_N = 0``.
    """
    F, K = _voluntary_system(flows, search)
    n = F.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        W = np.where(K > 0, F / np.where(K > 0, K, 1.0), 0.0)
    out = W.sum(axis=1)
    bad = np.flatnonzero(out <= 0)
    if bad.size:
        names = ["N" if b == n - 1 else str(flows.ids[b]) for b in bad[:20]]
        raise IdentificationError(f"no voluntary outflow at nodes {names}")
    if len(tarjan_scc(W)) != 1:
        raise IdentificationError("voluntary flow graph is reducible")
    T = W.T / out[:, None]
    if init is None:
        S = np.ones(n)
    else:
        x = np.append(np.asarray(init, dtype=float), 0.0)
        S = np.exp(x - x.max())
        S /= S[-1]
    change = np.inf
    for _ in range(max_iter):
        S_new = T @ S
        S_new /= S_new[-1]
        change = np.max(np.abs(S_new - S) / S_new)
        S = S_new
        if change < tol:
            break
    else:
        raise NumericalError("voluntary value power iteration did not converge", residual=change)
    return np.log(S[:-1]), 0.0


# ---------------------------------------------------------------------------
# search parameters given values


def _origin_profile(q, k, X1, X2, oo, J):
    """Per-origin weighted least squares of ``q`` on ``[X1, X2]`` (no intercept).

    Falls back to a minimum-norm solution when the two regressors are
    collinear within an origin (e.g. all destinations equally attractive).
    """
    s11 = np.bincount(oo, k * X1 * X1, J)
    s12 = np.bincount(oo, k * X1 * X2, J)
    s22 = np.bincount(oo, k * X2 * X2, J)
    b1 = np.bincount(oo, k * X1 * q, J)
    b2 = np.bincount(oo, k * X2 * q, J)
    det = s11 * s22 - s12 ** 2
    ok = det > 1e-10 * np.maximum(s11 * s22, 1e-300)
    c1 = np.zeros(J)
    c2 = np.zeros(J)
    c1[ok] = (b1[ok] * s22[ok] - s12[ok] * b2[ok]) / det[ok]
    c2[ok] = (s11[ok] * b2[ok] - s12[ok] * b1[ok]) / det[ok]
    for o in np.flatnonzero(~ok):
        H = np.array([[s11[o], s12[o]], [s12[o], s22[o]]])
        c1[o], c2[o] = np.linalg.pinv(H) @ np.array([b1[o], b2[o]])
    return c1, c2


def _cell_profile(flows: FlowMatrices, v):
    """Per-origin intercept and slope of the job-to-job cell structure.

    With ``f_d = ne_d / (L_N lambda0 A_Nd)`` substituted, each cell obeys
    ``q_od = M_od L_N / (L_o ne_d) = r_o g_d + c_o g_d A_od`` where
    ``g_d = 1 / A_Nd``, ``r_o = rho_o / lambda0`` and
    ``c_o = s_o lambda1 / lambda0``.  Cells are weighted by
    ``L_o ne_d / L_N``, proportional to their expected count.
    """
    J = flows.J
    off = ~np.eye(J, dtype=bool)
    oo, dd = np.nonzero(off)
    k = (flows.L[:, None] * flows.ne[None, :] / flows.L_N)[off]
    M = flows.ee_dense()[off]
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(k > 0, M / np.where(k > 0, k, 1.0), 0.0)
    g = (1.0 + np.exp(-v))[dd]
    A = accept_log(v[oo], v[dd])
    return _origin_profile(q, k, g, g * A, oo, J)


def _check_identifiable(flows: FlowMatrices):
    if np.any(flows.ne <= 0):
        raise IdentificationError(
            f"employers without hires from non-employment: {flows.ids[flows.ne <= 0][:20].tolist()}"
        )
    if flows.L_N <= 0:
        raise IdentificationError("no non-employment mass")
    if np.any(flows.L <= 0):
        raise IdentificationError(f"employers without employment: {flows.ids[flows.L <= 0][:20].tolist()}")


def _solve_delta_rho(ee_out, en_out, Fsum, B, A_N, lam1):
    """Per-employer (delta, rho) matching EE and EN outflow rates at ``lam1``.

    EE: rho*Fsum + (1-delta-rho)*lam1*B = ee_out
    EN: delta + (1-delta-rho)*(1-lam1)*A_N = en_out
    """
    a11 = -lam1 * B
    a12 = Fsum - lam1 * B
    a21 = 1.0 - (1.0 - lam1) * A_N
    a22 = -(1.0 - lam1) * A_N
    b1 = ee_out - lam1 * B
    b2 = en_out - (1.0 - lam1) * A_N
    det = a11 * a22 - a12 * a21
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = (b1 * a22 - a12 * b2) / det
        rho = (a11 * b2 - b1 * a21) / det
    raw_ok = np.isfinite(delta) & np.isfinite(rho) & (delta >= 0) & (rho >= 0) & (delta + rho < 1)
    delta = np.clip(np.where(np.isfinite(delta), delta, 0.0), 0.0, _BOX_MAX)
    rho = np.clip(np.where(np.isfinite(rho), rho, 0.0), 0.0, _BOX_MAX)
    over = delta + rho > _BOX_MAX
    if over.any():
        tot = delta[over] + rho[over]
        delta[over] *= _BOX_MAX / tot
        rho[over] *= _BOX_MAX / tot
    return delta, rho, ~raw_ok


def estimate_search_params(flows: FlowMatrices, sigmaV, sigmaV_N: float = 0.0,
                           corrected_f: bool = True) -> SearchParams:
    """Offer distribution, shock probabilities and arrival rates given values.

    * ``f_j`` is the share of hires from non-employment divided by their
      acceptance probability (``corrected_f=False`` uses the raw share).
    * ``lambda0`` matches total hires from non-employment.
    * ``lambda1``: the job-to-job flow from ``j`` to ``k`` per offer,
      ``M_jk / (L_j f_k)``, is ``rho_j + s_j lambda1 A_jk``, affine in the
      acceptance probability.  A per-origin fit gives the slopes
      ``s_j lambda1``; pooled over employers they give ``lambda1``.
    * ``(delta_j, rho_j)`` then solve each employer's EE and EN outflow
      equations exactly at that ``lambda1``; solutions outside the unit box
      are clipped and the employers listed in ``flagged``.
    """
    v = np.asarray(sigmaV, dtype=float) - sigmaV_N
    J = flows.J
    if v.shape != (J,) or not np.all(np.isfinite(v)):
        raise ContractError("sigmaV must be finite with one entry per employer")
    _check_identifiable(flows)
    L = flows.L
    Lsafe = np.where(L > 0, L, 1.0)
    A_hire = accept_log(0.0, v)
    if corrected_f:
        f = flows.ne / A_hire
        lambda0 = float(f.sum() / flows.L_N)
    else:
        f = flows.ne.astype(float)
        lambda0 = float(flows.ne.sum() / (flows.L_N * (f / f.sum() * A_hire).sum()))
    f = f / f.sum()
    lambda0 = min(lambda0, 1.0)

    r_scaled, c_scaled = _cell_profile(flows, v)
    rho0 = np.clip(r_scaled * lambda0, 0.0, _BOX_MAX)
    slope = np.clip(c_scaled * lambda0, 0.0, None)
    A_N = accept_log(v, 0.0)
    en_rate = flows.en / Lsafe
    with np.errstate(divide="ignore", invalid="ignore"):
        delta0 = (en_rate - (1.0 - rho0 - slope) * A_N) / (1.0 - A_N)
    delta0 = np.clip(np.nan_to_num(delta0), 0.0, _BOX_MAX)
    s0 = np.clip(1.0 - delta0 - rho0, 1e-12, None)
    lambda1 = float(np.clip((L * slope).sum() / (L * s0).sum(), 0.0, 1.0))

    A = accept_log(v[:, None], v[None, :])
    fk = np.broadcast_to(f, (J, J)).copy()
    np.fill_diagonal(fk, 0.0)
    ee_out = np.asarray(flows.ee.sum(axis=1)).ravel() / Lsafe
    delta, rho, flagged = _solve_delta_rho(ee_out, en_rate, fk.sum(axis=1), (fk * A).sum(axis=1), A_N, lambda1)
    flagged_ids = tuple(flows.ids[flagged & (L > 0)].tolist())
    if flagged_ids:
        logger.info("boundary (delta, rho) solution for %d employers", len(flagged_ids))
    return SearchParams(f, delta, rho, lambda0, lambda1, flagged_ids)


# ---------------------------------------------------------------------------
# joint estimation


def _initial_values(flows: FlowMatrices) -> np.ndarray:
    """Starting values from pairwise flow ratios.

    For a pair with flows both ways, ``M_od / M_do`` is roughly
    ``(L_o f_d S_d) / (L_d f_o S_o)``; log ratios are combined by weighted
    least squares, with non-employment as an extra node.
    """
    J = flows.J
    f = flows.ne / flows.ne.sum()
    L = np.where(flows.L > 0, flows.L, 1.0)
    M = flows.ee.tocoo()
    fwd = {(int(i), int(j)): x for i, j, x in zip(M.row, M.col, M.data)}
    rows, cols, rhs, wts = [], [], [], []
    for (o, d), x in fwd.items():
        y = fwd.get((d, o))
        if o < d and y:
            rows.append(o)
            cols.append(d)
            rhs.append(np.log(x / y) - np.log(L[o] * f[d] / (L[d] * f[o])))
            wts.append(min(x, y))
    for o in range(J):
        if flows.en[o] > 0 and flows.ne[o] > 0 and flows.L_N > 0:
            rows.append(o)
            cols.append(J)
            rhs.append(np.log(flows.en[o] / flows.ne[o]) - np.log(L[o] / (flows.L_N * f[o])))
            wts.append(min(flows.en[o], flows.ne[o]))
    n = len(rows)
    D = sp.coo_matrix(
        (np.r_[np.ones(n), -np.ones(n), 1.0], (np.r_[np.arange(n), np.arange(n), n], np.r_[cols, rows, J])),
        shape=(n + 1, J + 1),
    ).tocsr()
    sw = np.r_[np.sqrt(np.asarray(wts, dtype=float)), 1.0]
    D = sp.diags(sw) @ D
    b = np.r_[np.asarray(rhs, dtype=float), 0.0] * sw
    v = sp.linalg.lsqr(D, b, atol=1e-12, btol=1e-12, iter_lim=50_000)[0]
    return v[:J] - v[J]


class _FlowLikelihood:
    """Poisson quasi-likelihood of job-to-job cells and separations.

    Parameters ``x = (v, delta, rho, lambda1)``.  The offer distribution is
    profiled out from hires out of non-employment,
    ``f_d = ne_d g_d / sum_k ne_k g_k`` with ``g_d = 1 + exp(-v_d)``, which
    makes the dependence of every cell on ``v`` partly dense; that part is
    rank one and is added to the normal equations separately.
    """

    def __init__(self, flows: FlowMatrices):
        _check_identifiable(flows)
        J = flows.J
        self.J = J
        off = ~np.eye(J, dtype=bool)
        self.oo, self.dd = np.nonzero(off)
        self.n_ee = len(self.oo)
        self.y = np.r_[flows.ee_dense()[off], flows.en]
        self.pos = self.y > 0
        self.L = flows.L
        self.ne = flows.ne

    def split(self, x):
        J = self.J
        return x[:J], x[J:2 * J], x[2 * J:3 * J], x[3 * J]

    def _parts(self, x):
        v, d, r, l1 = self.split(x)
        oo, dd = self.oo, self.dd
        g = 1.0 + np.exp(-v)
        D = float((self.ne * g).sum())
        f = self.ne * g / D
        s = 1.0 - d - r
        A = accept_log(v[oo], v[dd])
        A_N = accept_log(v, 0.0)
        P = self.L[oo] * f[dd]
        h = r[oo] + s[oo] * l1 * A
        mu = np.r_[P * h, self.L * (d + s * (1.0 - l1) * A_N)]
        return mu, (g, D, s, A, A_N, P, h)

    def mean(self, x):
        return self._parts(x)[0]

    def nll(self, x) -> float:
        mu = self.mean(x)
        if not np.all(np.isfinite(mu)) or np.any((mu <= 0) & self.pos):
            return np.inf
        return float(mu.sum() - self.y[self.pos] @ np.log(mu[self.pos]))

    def pearson_dispersion(self, x) -> float:
        mu = self.mean(x)
        ok = mu > 0
        chi2 = float(np.sum((self.y[ok] - mu[ok]) ** 2 / mu[ok]))
        return chi2 / max(len(self.y) - (3 * self.J + 1), 1)

    def normal_equations(self, x):
        """Fisher information and gradient of :meth:`nll`."""
        J, oo, dd, n_ee = self.J, self.oo, self.dd, self.n_ee
        v, d, r, l1 = self.split(x)
        mu, (g, D, s, A, A_N, P, h) = self._parts(x)
        w = 1.0 / np.sqrt(np.maximum(mu, 1e-12 * max(mu.max(), 1e-300)))
        e = (self.y - mu) * w
        dA = A * (1.0 - A)
        gp = 1.0 - g
        o = np.arange(J)
        dAN = A_N * (1.0 - A_N)
        L = self.L
        rows = np.r_[np.tile(np.arange(n_ee), 5), np.tile(n_ee + o, 4)]
        cols = np.concatenate([dd, oo, J + oo, 2 * J + oo, np.full(n_ee, 3 * J),
                               o, J + o, 2 * J + o, np.full(J, 3 * J)])
        vals = np.concatenate([
            P * ((gp[dd] / g[dd]) * h + s[oo] * l1 * dA), P * (-s[oo] * l1 * dA),
            P * (-l1 * A), P * (1.0 - l1 * A), P * s[oo] * A,
            -L * s * (1.0 - l1) * dAN, L * (1.0 - (1.0 - l1) * A_N),
            -L * (1.0 - l1) * A_N, -L * s * A_N,
        ])
        dmu = sp.csr_matrix((vals, (rows, cols)), shape=(n_ee + J, 3 * J + 1))
        Js = sp.diags(-w) @ dmu
        # d f_d / d v_k through the normaliser: -mu * ne_k g'_k / D on EE rows
        a = np.r_[w[:n_ee] * mu[:n_ee] / D, np.zeros(J)]
        b = np.zeros(3 * J + 1)
        b[:J] = self.ne * gp
        Jta = Js.T @ a
        H = (Js.T @ Js).toarray() + np.outer(Jta, b) + np.outer(b, Jta) + (a @ a) * np.outer(b, b)
        grad = Js.T @ e + b * (a @ e)
        return H, grad

    def active_set(self, x, grad) -> np.ndarray:
        """Box-constrained coordinates sitting on a bound with the descent
        direction pointing out of the box."""
        J = self.J
        out = np.zeros(x.size, dtype=bool)
        lo = np.r_[np.zeros(J), np.zeros(J), 0.0]
        hi = np.r_[np.full(J, _BOX_MAX), np.full(J, _BOX_MAX), 1.0]
        z = x[J:]
        g = grad[J:]
        out[J:] = ((z <= lo) & (g > 0)) | ((z >= hi) & (g < 0))
        # a saturated delta + rho sum: hold both if the descent raises the sum
        d, r = x[J:2 * J], x[2 * J:3 * J]
        sat = (d + r >= _BOX_MAX) & (grad[J:2 * J] + grad[2 * J:3 * J] < 0)
        out[J:2 * J] |= sat
        out[2 * J:3 * J] |= sat
        return out

    def project(self, x):
        J = self.J
        x = x.copy()
        d = np.clip(x[J:2 * J], 0.0, _BOX_MAX)
        r = np.clip(x[2 * J:3 * J], 0.0, _BOX_MAX)
        over = d + r > _BOX_MAX
        if over.any():
            tot = d[over] + r[over]
            d[over] *= _BOX_MAX / tot
            r[over] *= _BOX_MAX / tot
        x[J:2 * J], x[2 * J:3 * J] = d, r
        x[3 * J] = np.clip(x[3 * J], 0.0, 1.0)
        return x


def _levenberg_marquardt(model: _FlowLikelihood, x, penalty, tol, ftol, max_iter, trace, round_no,
                         cap_is_error=True):
    """Damped Fisher scoring on ``nll + penalty``; returns ``(x, H, free)``
    where ``free`` marks coordinates not pinned at a bound in the last step.

    ``penalty`` is a pair of quadratic forms acting on the ``delta`` and
    ``rho`` blocks.
    """
    J = model.J
    Pd, Pr = penalty
    blocks = (slice(J, 2 * J), slice(2 * J, 3 * J))

    def objective(z):
        return model.nll(z) + 0.5 * (z[blocks[0]] @ Pd @ z[blocks[0]] + z[blocks[1]] @ Pr @ z[blocks[1]])

    C = objective(x)
    mu = 1e-3
    H, free = None, np.ones(x.size, dtype=bool)
    streak = np.zeros(x.size, dtype=int)
    for it in range(1, max_iter + 1):
        H, grad = model.normal_equations(x)
        for blk, P in zip(blocks, (Pd, Pr)):
            H[blk, blk] += P
            grad[blk] += P @ x[blk]
        # parameters pushed against a bound for several steps in a row are held
        # fixed so the step is not wasted on the projection; pinning them right
        # away can steer the early iterations into a worse basin
        pinned = model.active_set(x, grad)
        streak = np.where(pinned, streak + 1, 0)
        free = streak < _PIN_AFTER
        Hf = H[np.ix_(free, free)]
        dH = np.diag(Hf).copy() + 1e-12
        accepted = False
        while mu <= 1e16:
            try:
                step = np.zeros_like(x)
                step[free] = np.linalg.solve(Hf + mu * np.diag(dH), -grad[free])
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            x_new = model.project(x + step)
            C_new = objective(x_new)
            if C_new <= C:
                accepted = True
                mu = max(mu / 10.0, 1e-15)
                break
            mu *= 10.0
        if not accepted:
            trace.append({"round": round_no, "iteration": it, "objective": C, "step": 0.0})
            return x, H, free
        gain = C - C_new
        dx = float(np.max(np.abs(x_new - x)))
        x, C = x_new, C_new
        trace.append({"round": round_no, "iteration": it, "objective": C, "step": dx})
        # a tiny gain only ends the fit once steps are small too: near the
        # optimum the objective flattens before the iterate settles
        if dx < tol or (gain <= ftol * abs(C) and dx < np.sqrt(tol)):
            return x, H, free
    if cap_is_error:
        raise NumericalError("flow likelihood fit hit the iteration cap", residual=C, trace=trace)
    return x, H, free


def joint_estimate(flows: FlowMatrices, tol=1e-10, ftol=1e-10, max_iter=2_000, max_rounds=50,
                   round_tol=1e-2, shrinkage=True, probe_iter=60, inner_tol=1e-12) -> JointEstimate:
    """Values and search parameters that jointly reproduce the flows.

    Job-to-job cells and separations into non-employment are treated as
    Poisson counts whose means follow the model, with the offer
    distribution profiled out from hires out of non-employment.  Values,
    per-employer shock probabilities and ``lambda1`` are fitted jointly by
    damped Fisher scoring, started from pairwise flow ratios.

    Per-employer ``delta`` and ``rho`` are shrunk towards their weighted
    means with an empirical-Bayes penalty ``phi / tau^2``.  The dispersion
    ``phi`` is the Pearson statistic of an unpenalised fit of at most
    ``probe_iter`` steps; the between-employer variances ``tau^2`` are
    updated by EM until they settle.  On exact model flows the unpenalised
    fit is perfect, ``phi`` is zero and the generating parameters are
    recovered.

    The trace has one entry per accepted step (objective non-increasing
    within a round) and one summary entry per round.  A final entry
    reports the distance between the fitted values and one pass of the
    voluntary balance at the fitted search parameters.
    """
    model = _FlowLikelihood(flows)
    J = flows.J
    v0 = _initial_values(flows)
    start = estimate_search_params(flows, v0)
    x = model.project(np.r_[v0, start.delta, start.rho, start.lambda1])
    w = flows.L / flows.L.sum()
    C = np.eye(J) - np.outer(np.ones(J), w)
    P0 = C.T @ C
    zero = np.zeros((J, J))

    def wvar(z):
        m = w @ z
        return float(w @ (z - m) ** 2)

    trace: list = []
    tau_d = max(wvar(x[J:2 * J]), 1e-12)
    tau_r = max(wvar(x[2 * J:3 * J]), 1e-12)
    probe, _, _ = _levenberg_marquardt(model, x, (zero, zero), tol, ftol, probe_iter if shrinkage else max_iter,
                                    trace, "probe", cap_is_error=not shrinkage)
    phi = model.pearson_dispersion(probe)
    trace.append({"round": "probe", "dispersion": phi})
    if not shrinkage or phi <= 1e-20:
        x = probe
        if shrinkage:
            x, _, _ = _levenberg_marquardt(model, x, (zero, zero), tol, ftol, max_iter, trace, "exact")
    else:
        for rnd in range(max_rounds):
            kd, kr = phi / tau_d, phi / tau_r
            x_prev = x
            x, H, free = _levenberg_marquardt(model, x, (kd * P0, kr * P0), tol, ftol, max_iter, trace, rnd)
            # coordinates pinned at a bound carry no posterior spread
            post = np.zeros(x.size)
            post[free] = phi * np.diag(np.linalg.pinv(H[np.ix_(free, free)]))
            tau_d_new = max(wvar(x[J:2 * J]) + w @ post[J:2 * J], 1e-12)
            tau_r_new = max(wvar(x[2 * J:3 * J]) + w @ post[2 * J:3 * J], 1e-12)
            trace.append({"round": rnd, "tau2_delta": tau_d_new, "tau2_rho": tau_r_new,
                          "shrink_delta": phi / tau_d_new, "shrink_rho": phi / tau_r_new})
            # a block has settled when its variance is stable or, as the variance
            # heads to zero under complete pooling, its estimates stop moving
            moved = np.abs(x - x_prev)
            settled = all(abs(new - old) <= round_tol * old or moved[blk].max() <= tol
                          for new, old, blk in ((tau_d_new, tau_d, slice(J, 2 * J)),
                                                (tau_r_new, tau_r, slice(2 * J, 3 * J))))
            tau_d, tau_r = tau_d_new, tau_r_new
            if settled:
                break
        else:
            raise NumericalError("shrinkage rounds did not settle", residual=phi, trace=trace)

    v, delta, rho, lambda1 = model.split(x)
    g = 1.0 + np.exp(-v)
    f = flows.ne * g / np.sum(flows.ne * g)
    lambda0 = float(min(np.sum(flows.ne * g) / flows.L_N, 1.0))
    at_bound = (delta <= 0) | (rho <= 0) | (delta + rho >= _BOX_MAX)
    search = SearchParams(f, delta.copy(), rho.copy(), lambda0, float(lambda1), tuple(flows.ids[at_bound].tolist()))
    try:
        v_bal, _ = voluntary_value_fixed_point(flows, search, tol=inner_tol, init=v)
        gap = float(np.max(np.abs(v_bal - v)))
    except (IdentificationError, NumericalError) as exc:
        logger.warning("voluntary balance check failed: %s", exc)
        gap = float("nan")
    trace.append({"balance_gap": gap, "lambda0": lambda0, "lambda1": float(lambda1)})
    return JointEstimate(v.copy(), 0.0, search, flows.L.copy(), flows.L_N, flows.ids, trace)

def outer_iteration(flows: FlowMatrices, sigmaV, inner_tol=1e-12):
    """One alternation step: search parameters at ``sigmaV``, then the balance values."""
    search = estimate_search_params(flows, sigmaV)
    return voluntary_value_fixed_point(flows, search, tol=inner_tol, init=sigmaV)[0], search


# ---------------------------------------------------------------------------
# scale and amenities


def weighted_moments(x, w):
    w = np.asarray(w, dtype=float)
    x = np.asarray(x, dtype=float)
    m = np.sum(w * x) / w.sum()
    var = np.sum(w * (x - m) ** 2) / w.sum()
    return float(m), float(var)


def weighted_corr(x, y, w) -> float:
    mx, vx = weighted_moments(x, w)
    my, vy = weighted_moments(y, w)
    if vx <= 0 or vy <= 0:
        return 0.0
    cov = np.sum(np.asarray(w) * (np.asarray(x) - mx) * (np.asarray(y) - my)) / np.sum(w)
    return float(cov / np.sqrt(vx * vy))


@dataclass(frozen=True)
class Decomposition:
    sigma_hat: float
    u_scaled: np.ndarray
    u: np.ndarray
    a: np.ndarray
    corr_psi_a: float


def calibrate_sigma_and_decompose(sigmaV, sigmaV_N, search: SearchParams, psi, L, beta=DEFAULT_BETA) -> Decomposition:
    """Set the taste-shock scale and split flow utility into pay and amenity.

    ``sigma * u`` comes from inverting the scaled value recursion.  The scale
    is ``sd(sigma * u) / sd(psi)`` (worker-year weights ``L``) so that flow
    utility and pay have equal variance.  ``u`` is reported net of its
    weighted mean, so ``a = u - psi`` has weighted mean zero whenever
    ``psi`` does.
    """
    psi = np.asarray(psi, dtype=float)
    w = np.asarray(L, dtype=float)
    values = ValueVector(np.asarray(sigmaV, dtype=float), sigmaV_N, scaled=True)
    w_u = invert_flow_utility(search.as_params(beta), values).u
    _, var_psi = weighted_moments(psi, w)
    if var_psi <= 0:
        raise IdentificationError("pay premiums have zero variance; sigma is not identified")
    mean_wu, var_wu = weighted_moments(w_u, w)
    if var_wu <= 0:
        raise IdentificationError("flow utilities have zero variance; sigma is not identified")
    sigma_hat = float(np.sqrt(var_wu / var_psi))
    u_scaled = w_u - mean_wu
    u = u_scaled / sigma_hat
    a = u - psi
    return Decomposition(sigma_hat, u_scaled, u, a, weighted_corr(psi, a, w))


def assemble_estimates(joint: JointEstimate, psi, decomposition: Decomposition) -> EmployerEstimates:
    s = joint.search
    return EmployerEstimates(
        ids=joint.ids, sigmaV=joint.sigmaV, sigmaV_N=joint.sigmaV_N, psi=np.asarray(psi, dtype=float),
        u_scaled=decomposition.u_scaled, sigma_hat=decomposition.sigma_hat, a=decomposition.a,
        s=s.s, f=s.f, delta=s.delta, rho=s.rho, lambda0=s.lambda0, lambda1=s.lambda1, L=joint.L,
    )
