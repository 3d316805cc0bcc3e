"""Worker flow matrices and the estimation-eligible employer set."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .errors import ContractError, DataError, IdentificationError

logger = logging.getLogger(__name__)

NONEMP = -1
DAYS_PER_PERIOD = 365


@dataclass(frozen=True)
class FlowMatrices:
    """Per-period average transition counts.

    ``ee[j, k]`` counts job-to-job moves from employer index ``j`` to ``k``;
    ``en`` and ``ne`` count moves into and out of non-employment; ``L`` and
    ``L_N`` are mean worker counts per period.  ``ids`` maps indices to
    employer identifiers.
    """

    ee: sp.csr_matrix
    en: np.ndarray
    ne: np.ndarray
    L: np.ndarray
    L_N: float
    ids: np.ndarray = None
    parts: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ee = sp.csr_matrix(self.ee, dtype=float)
        ee.setdiag(0.0)
        ee.eliminate_zeros()
        object.__setattr__(self, "ee", ee)
        J = ee.shape[0]
        if ee.shape != (J, J):
            raise ContractError("ee must be square")
        for name in ("en", "ne", "L"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != (J,):
                raise ContractError(f"{name} must have length {J}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        ids = np.arange(J) if self.ids is None else np.asarray(self.ids)
        if ids.shape != (J,):
            raise ContractError("ids must have one entry per employer")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "L_N", float(self.L_N))
        if (ee.data < 0).any() or (self.en < 0).any() or (self.ne < 0).any() or (self.L < 0).any() or self.L_N < 0:
            raise ContractError("flow entries must be non-negative")

    @classmethod
    def from_dense(cls, ee, en, ne, L, L_N, ids=None, parts=None):
        return cls(sp.csr_matrix(np.asarray(ee, dtype=float)), en, ne, L, L_N, ids, parts or {})

    @property
    def J(self) -> int:
        return self.ee.shape[0]

    def ee_dense(self) -> np.ndarray:
        return self.ee.toarray()

    def restrict(self, keep_ids) -> "FlowMatrices":
        """Sub-flows on the employers in ``keep_ids`` (order follows ``self.ids``)."""
        mask = np.isin(self.ids, np.asarray(list(keep_ids)))
        idx = np.flatnonzero(mask)
        return FlowMatrices(
            self.ee[idx][:, idx], self.en[idx], self.ne[idx], self.L[idx], self.L_N, self.ids[idx]
        )

    def scaled(self, c: float) -> "FlowMatrices":
        return FlowMatrices(self.ee * c, self.en * c, self.ne * c, self.L * c, self.L_N * c, self.ids)


def _sorted_panel(panel: pd.DataFrame) -> pd.DataFrame:
    df = panel.sort_values(["worker_id", "period"], kind="mergesort").reset_index(drop=True)
    dup = df.duplicated(["worker_id", "period"], keep=False)
    if dup.any():
        bad = sorted(df.loc[dup, "worker_id"].unique().tolist())
        raise DataError(f"more than one record per worker-period for workers {bad[:20]}")
    return df


def build_flows(
    panel: pd.DataFrame, gap_days: int = 31, days_per_period: int = DAYS_PER_PERIOD
) -> FlowMatrices:
    """Tally employer-to-employer and non-employment transitions in a panel.

    Two consecutive employment records of a worker at different employers
    count as a job-to-job move when the gap between the end of the first
    spell and the start of the second is at most ``gap_days``; otherwise they
    count as a move into non-employment followed by a hire out of it.
    Counts are averaged over the number of period-to-period transitions.
    """
    df = _sorted_panel(panel)
    periods = np.sort(df["period"].unique())
    n_periods = len(periods)
    n_trans = max(n_periods - 1, 1)
    emp = df["employer_id"].to_numpy()
    employed = emp != NONEMP
    ids = np.unique(emp[employed])
    J = len(ids)
    jidx = np.full(len(df), -1, dtype=np.int64)
    jidx[employed] = np.searchsorted(ids, emp[employed])

    L = np.bincount(jidx[employed], minlength=J) / n_periods
    L_N = float((~employed).sum()) / n_periods

    w = df["worker_id"].to_numpy()
    same = w[1:] == w[:-1]
    prev = np.flatnonzero(same)
    nxt = prev + 1
    per = df["period"].to_numpy().astype(np.int64)
    start = per * days_per_period + df["spell_start_day"].to_numpy().astype(np.int64)
    end = per * days_per_period + df["spell_end_day"].to_numpy().astype(np.int64)

    both = employed[prev] & employed[nxt]
    gap = start[nxt] - end[prev] - 1
    overlap = both & (gap < 0)
    if overlap.any():
        bad = sorted(set(w[prev[overlap]].tolist()))
        raise DataError(f"overlapping spells for workers {bad[:20]}")
    moved = both & (jidx[prev] != jidx[nxt])
    is_ee = moved & (gap <= gap_days)
    is_long = moved & (gap > gap_days)
    to_n = employed[prev] & ~employed[nxt]
    from_n = ~employed[prev] & employed[nxt]

    ee = sp.coo_matrix(
        (np.ones(is_ee.sum()), (jidx[prev[is_ee]], jidx[nxt[is_ee]])), shape=(J, J)
    ).tocsr()
    en = np.bincount(jidx[prev[to_n | is_long]], minlength=J).astype(float)
    ne = np.bincount(jidx[nxt[from_n | is_long]], minlength=J).astype(float)
    return FlowMatrices(ee / n_trans, en / n_trans, ne / n_trans, L, L_N, ids)


def stability_filter(panel: pd.DataFrame, min_periods: int = 2, min_nonsingleton: float = 5.0) -> np.ndarray:
    """Employers present in at least ``min_periods`` periods with, on average
    over those periods, at least ``min_nonsingleton`` workers who appear again
    later in the panel (any later record counts)."""
    df = _sorted_panel(panel)
    later = np.r_[df["worker_id"].to_numpy()[1:] == df["worker_id"].to_numpy()[:-1], False]
    df = df.assign(_later=later)
    df = df[df["employer_id"] != NONEMP]
    per_period = df.groupby(["employer_id", "period"])["_later"].sum()
    stats = per_period.groupby(level=0).agg(["size", "mean"])
    keep = stats[(stats["size"] >= min_periods) & (stats["mean"] >= min_nonsingleton)]
    return np.sort(keep.index.to_numpy())


def _adjacency(ee) -> sp.csr_matrix:
    A = sp.csr_matrix(ee, dtype=float, copy=True)
    A.setdiag(0.0)
    A.data = (A.data > 0).astype(float)
    A.eliminate_zeros()
    return A


def tarjan_scc(ee) -> list[np.ndarray]:
    """Strongly connected components of the positive-count graph of ``ee``.

    Iterative Tarjan; returns index arrays, each sorted, in the order found.
    """
    A = _adjacency(ee)
    n = A.shape[0]
    indptr, indices = A.indptr, A.indices
    index = np.full(n, -1, dtype=np.int64)
    low = np.zeros(n, dtype=np.int64)
    on_stack = np.zeros(n, dtype=bool)
    stack: list[int] = []
    comps: list[np.ndarray] = []
    counter = 0
    for root in range(n):
        if index[root] >= 0:
            continue
        work = [(root, indptr[root])]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack[root] = True
        while work:
            v, ptr = work[-1]
            if ptr < indptr[v + 1]:
                work[-1] = (v, ptr + 1)
                u = indices[ptr]
                if index[u] < 0:
                    index[u] = low[u] = counter
                    counter += 1
                    stack.append(u)
                    on_stack[u] = True
                    work.append((u, indptr[u]))
                elif on_stack[u]:
                    low[v] = min(low[v], index[u])
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[v])
            if low[v] == index[v]:
                comp = []
                while True:
                    u = stack.pop()
                    on_stack[u] = False
                    comp.append(u)
                    if u == v:
                        break
                comps.append(np.sort(np.array(comp, dtype=np.int64)))
    return comps


def strongly_connected_components(ee, ids=None) -> list[np.ndarray]:
    """Partition of employer ids into strongly connected components."""
    comps = tarjan_scc(ee)
    if ids is None:
        return comps
    ids = np.asarray(ids)
    return [ids[c] for c in comps]


def largest_component(flows: FlowMatrices) -> np.ndarray:
    """Component with the most worker mass; ties by size, then lowest id."""
    comps = tarjan_scc(flows.ee)
    best = max(comps, key=lambda c: (flows.L[c].sum(), len(c), -flows.ids[c].min()))
    return flows.ids[best]


def estimation_set(flows: FlowMatrices) -> np.ndarray:
    """Largest strongly connected set whose members all hire from non-employment.

    The two restrictions are applied alternately until the set stops
    changing.
    """
    current = flows
    trace = []
    while True:
        if current.J == 0:
            raise IdentificationError("estimation set is empty", trace=trace)
        comp = largest_component(current)
        sub = current.restrict(comp)
        keep = sub.ids[sub.ne > 0]
        trace.append({"size_in": current.J, "largest_scc": len(comp), "hiring": len(keep)})
        logger.debug("estimation_set step %s", trace[-1])
        if len(keep) == 0:
            raise IdentificationError("estimation set is empty", trace=trace)
        if len(keep) == current.J:
            return np.sort(keep)
        current = current.restrict(keep)
