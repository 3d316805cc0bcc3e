"""Job-ladder model with Gumbel taste shocks.

Workers at employer ``j`` face, each period and in this order, an exogenous
separation to non-employment (``delta_j``), a forced relocation drawn from the
offer distribution (``rho_j``), an outside offer (``lambda1``) accepted by a
logit comparison, or otherwise a logit stay/quit comparison against
non-employment.  Non-employed workers receive offers at rate ``lambda0``.

Values are handled internally in the scaled space ``sigma * V`` where the
Gumbel shocks have unit scale; this is also the space flows identify.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ContractError, NumericalError
from .flows import FlowMatrices

EULER_GAMMA = float(np.euler_gamma)
DEFAULT_BETA = 1.0 / 1.05


def _frozen(x, name):
    arr = np.array(x, dtype=float, copy=True)
    if arr.ndim != 1:
        raise ContractError(f"{name} must be one-dimensional")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class EconomyParams:
    """Primitive parameters of the economy (one entry per employer)."""

    psi: np.ndarray
    a: np.ndarray
    delta: np.ndarray
    rho: np.ndarray
    f: np.ndarray
    lambda0: float
    lambda1: float
    beta: float = DEFAULT_BETA
    sigma: float = 1.0
    u_N: float = 0.0

    def __post_init__(self):
        for name in ("psi", "a", "delta", "rho", "f"):
            object.__setattr__(self, name, _frozen(getattr(self, name), name))
        J = self.psi.shape[0]
        if J < 1:
            raise ContractError("need at least one employer")
        for name in ("a", "delta", "rho", "f"):
            if getattr(self, name).shape[0] != J:
                raise ContractError(f"{name} has length {getattr(self, name).shape[0]}, expected {J}")
        for name in ("psi", "a", "delta", "rho", "f"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ContractError(f"{name} has non-finite entries")
        if np.any(self.delta < 0) or np.any(self.delta >= 1):
            raise ContractError("delta must lie in [0, 1)")
        if np.any(self.rho < 0) or np.any(self.rho >= 1):
            raise ContractError("rho must lie in [0, 1)")
        if np.any(self.delta + self.rho >= 1):
            raise ContractError("delta + rho must be below 1 for every employer")
        if np.any(self.f < 0) or abs(self.f.sum() - 1.0) > 1e-12:
            raise ContractError("f must be non-negative and sum to 1")
        for name in ("lambda0", "lambda1"):
            v = float(getattr(self, name))
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1]")
            object.__setattr__(self, name, v)
        if not 0.0 < self.beta < 1.0:
            raise ContractError("beta must lie in (0, 1)")
        if not (self.sigma > 0 and np.isfinite(self.sigma)):
            raise ContractError("sigma must be positive")
        for name in ("beta", "sigma", "u_N"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def J(self) -> int:
        return int(self.psi.shape[0])

    @property
    def s(self) -> np.ndarray:
        """Job security ``1 - delta - rho``."""
        return 1.0 - self.delta - self.rho

    def flow_utility(self) -> "FlowUtility":
        return FlowUtility(self.psi + self.a, self.u_N)


@dataclass(frozen=True)
class ValueVector:
    V: np.ndarray
    V_N: float
    scaled: bool = False

    def __post_init__(self):
        object.__setattr__(self, "V", _frozen(self.V, "V"))
        object.__setattr__(self, "V_N", float(self.V_N))
        if not (np.all(np.isfinite(self.V)) and np.isfinite(self.V_N)):
            raise ContractError("values must be finite")

    def as_scaled(self, sigma: float) -> "ValueVector":
        if self.scaled:
            return self
        return ValueVector(self.V * sigma, self.V_N * sigma, scaled=True)


@dataclass(frozen=True)
class FlowUtility:
    """Per-period utility of each employer; ``u = psi + a``."""

    u: np.ndarray
    u_N: float = 0.0
    scaled: bool = False

    def __post_init__(self):
        object.__setattr__(self, "u", _frozen(self.u, "u"))
        object.__setattr__(self, "u_N", float(self.u_N))
        if not (np.all(np.isfinite(self.u)) and np.isfinite(self.u_N)):
            raise ContractError("flow utilities must be finite")


def _check_positive(x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise ContractError("arguments must be strictly positive and finite")
    return x


def acceptance_probability(S_origin, S_dest):
    """Probability that a worker holding ``S_origin`` accepts ``S_dest``.

    ``S = exp(sigma * V)``.  The smaller of the two complementary
    probabilities is computed directly and the other as its complement, so
    ``p(x, y) + p(y, x) == 1`` holds exactly in floating point.
    """
    so = _check_positive(S_origin)
    sd = _check_positive(S_dest)
    total = so + sd
    small = np.minimum(so, sd) / total
    p = np.where(sd > so, 1.0 - small, small)
    return float(p) if p.ndim == 0 else p


def accept_log(v_origin, v_dest):
    """Acceptance probability from scaled values ``v = sigma * V`` (log S)."""
    d = np.subtract(v_dest, v_origin, dtype=float)
    small = expit(-np.abs(d))
    return np.where(d > 0, 1.0 - small, small)


def gumbel_expected_max(scaled_values) -> float:
    """``E[max_i (v_i + eps_i)]`` for iid standard Gumbel ``eps``: logsumexp + gamma."""
    v = np.asarray(scaled_values, dtype=float).ravel()
    if v.size == 0:
        raise ContractError("need at least one value")
    if not np.all(np.isfinite(v)):
        raise ContractError("values must be finite")
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()) + EULER_GAMMA)


def _lse2(x, y):
    m = np.maximum(x, y)
    return m + np.log1p(np.exp(-np.abs(x - y)))


def expected_flows(params: EconomyParams, values: ValueVector, L, L_N: float) -> FlowMatrices:
    """Expected per-period transition counts implied by the model.

    Returns a :class:`FlowMatrices` whose ``parts`` hold the relocation and
    voluntary EE components and the exogenous/voluntary EN components.
    Self-moves are not observable, so the EE diagonal is zero; the workers
    involved are stayers.
    """
    L = np.asarray(L, dtype=float)
    J = params.J
    if L.shape != (J,) or values.V.shape != (J,):
        raise ContractError("dimension mismatch between params, values and L")
    if np.any(L < 0) or L_N < 0:
        raise ContractError("employment masses must be non-negative")
    sv = values.as_scaled(params.sigma)
    v, vN = sv.V, sv.V_N
    f, s = params.f, params.s
    acc = accept_log(v[:, None], v[None, :])
    reloc = (L * params.rho)[:, None] * f[None, :]
    vol = (L * s * params.lambda1)[:, None] * f[None, :] * acc
    np.fill_diagonal(reloc, 0.0)
    np.fill_diagonal(vol, 0.0)
    en_exo = L * params.delta
    en_vol = L * s * (1.0 - params.lambda1) * accept_log(v, vN)
    ne = L_N * params.lambda0 * f * accept_log(vN, v)
    return FlowMatrices.from_dense(
        reloc + vol,
        en=en_exo + en_vol,
        ne=ne,
        L=L,
        L_N=L_N,
        parts={
            "ee_relocation": reloc,
            "ee_voluntary": vol,
            "en_exogenous": en_exo,
            "en_voluntary": en_vol,
        },
    )


def transition_matrix(params: EconomyParams, values: ValueVector) -> np.ndarray:
    """(J+1)x(J+1) Markov matrix over employers then non-employment (last)."""
    J = params.J
    one = expected_flows(params, values, np.ones(J), 1.0)
    P = np.zeros((J + 1, J + 1))
    P[:J, :J] = one.ee_dense()
    P[:J, J] = one.en
    P[J, :J] = one.ne
    P[np.arange(J + 1), np.arange(J + 1)] = 1.0 - P.sum(axis=1)
    return P


def stationary_distribution(params: EconomyParams, values: ValueVector) -> np.ndarray:
    """Stationary shares over (employers..., non-employment)."""
    P = transition_matrix(params, values)
    n = P.shape[0]
    A = np.vstack([P.T - np.eye(n), np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi = np.linalg.lstsq(A, b, rcond=None)[0]
    return np.clip(pi, 0.0, None) / np.clip(pi, 0.0, None).sum()


def _continuation(params: EconomyParams, v, vN):
    """Expected scaled continuation values (before discounting)."""
    f, s = params.f, params.s
    g = EULER_GAMMA
    reloc = f @ v + g
    offer = _lse2(v[:, None], v[None, :]) @ f + g
    quit = _lse2(v, vN) + g
    cont = params.delta * (vN + g) + params.rho * reloc + s * params.lambda1 * offer + s * (1.0 - params.lambda1) * quit
    cont_N = params.lambda0 * (f @ _lse2(v, vN) + g) + (1.0 - params.lambda0) * (vN + g)
    return cont, cont_N


def bellman(params: EconomyParams, w, w_N, v, vN):
    """One application of the scaled value recursion."""
    cont, cont_N = _continuation(params, v, vN)
    return w + params.beta * cont, w_N + params.beta * cont_N


def value_iteration(params: EconomyParams, w, w_N, tol=1e-12, max_iter=100_000):
    """Fixed point of :func:`bellman` by successive approximation.

    Returns ``(v, v_N, residuals)`` where ``residuals[i]`` is the sup-norm
    change at iteration ``i``.
    """
    w = np.asarray(w, dtype=float)
    v = w / (1.0 - params.beta)
    vN = w_N / (1.0 - params.beta)
    residuals = []
    for _ in range(max_iter):
        v_new, vN_new = bellman(params, w, w_N, v, vN)
        res = max(np.max(np.abs(v_new - v)), abs(vN_new - vN))
        residuals.append(float(res))
        v, vN = v_new, vN_new
        if res < tol:
            return v, vN, residuals
    raise NumericalError(
        f"value iteration did not converge in {max_iter} iterations", residual=residuals[-1], trace=residuals
    )


def solve_values(params: EconomyParams, u: FlowUtility, tol=1e-12, max_iter=100_000) -> ValueVector:
    """Employer and non-employment values for flow utilities ``u``.

    A scaled ``u`` (``sigma * u``) yields scaled values; otherwise values are
    in utils.
    """
    if u.u.shape != (params.J,):
        raise ContractError("flow utility length does not match params")
    sig = 1.0 if u.scaled else params.sigma
    v, vN, _ = value_iteration(params, u.u * sig, u.u_N * sig, tol=tol, max_iter=max_iter)
    if u.scaled:
        return ValueVector(v, vN, scaled=True)
    return ValueVector(v / sig, vN / sig, scaled=False)


def invert_flow_utility(params: EconomyParams, values: ValueVector) -> FlowUtility:
    """Flow utilities that make ``values`` a fixed point of the recursion.

    Scaled values give scaled utilities (``sigma * u``); this is how flow
    utility is recovered when ``sigma`` is not yet known.
    """
    if values.V.shape != (params.J,):
        raise ContractError("value length does not match params")
    sig = 1.0 if values.scaled else params.sigma
    v, vN = values.V * sig, values.V_N * sig
    cont, cont_N = _continuation(params, v, vN)
    w = v - params.beta * cont
    w_N = vN - params.beta * cont_N
    if values.scaled:
        return FlowUtility(w, w_N, scaled=True)
    return FlowUtility(w / sig, w_N / sig)
