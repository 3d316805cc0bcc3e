import itertools

import numpy as np
import pandas as pd
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from jobvalues.errors import DataError, IdentificationError
from jobvalues.flows import (NONEMP, FlowMatrices, build_flows, estimation_set, stability_filter,
                             strongly_connected_components)


def rec(w, t, j, s=1, e=365):
    return {"worker_id": w, "period": t, "employer_id": j, "log_wage": 1.0 if j != NONEMP else np.nan,
            "age": 30, "gender": "F", "education": 1, "spell_start_day": s, "spell_end_day": e}


def closure(A):
    n = A.shape[0]
    R = (A > 0) | np.eye(n, dtype=bool)
    for k in range(n):
        R = R | (R[:, [k]] & R[[k], :])
    return R


class TestBuildFlows:
    def test_stayer(self):
        fl = build_flows(pd.DataFrame([rec(1, t, 7) for t in range(4)]))
        assert fl.ee.nnz == 0 and fl.L.tolist() == [1.0]

    def test_short_gap_is_job_to_job(self):
        fl = build_flows(pd.DataFrame([rec(1, 0, 3, e=100), rec(1, 1, 4, s=120 - 365 + 365)]))
        # spell at 3 ends day 100 of period 0; next starts day 120 of period 1 -> long gap
        assert fl.ee.nnz == 0
        fl = build_flows(pd.DataFrame([rec(1, 0, 3, e=350), rec(1, 1, 4, s=5)]))
        assert fl.ee_dense()[0, 1] == 1.0

    def test_gap_boundary(self):
        ok = build_flows(pd.DataFrame([rec(1, 0, 3, e=365 - 10), rec(1, 1, 4, s=22)]))  # 31 days strictly between
        assert ok.ee_dense()[0, 1] == 1.0
        long = build_flows(pd.DataFrame([rec(1, 0, 3, e=365 - 10), rec(1, 1, 4, s=23)]))  # 32 days strictly between
        assert long.ee.nnz == 0 and long.en[0] == 1.0 and long.ne[1] == 1.0

    def test_overlap_is_data_error(self):
        with pytest.raises(DataError, match="9"):
            build_flows(pd.DataFrame([rec(9, 0, 3, e=365), rec(9, 0, 4)]))

    def test_averaged_over_transitions(self):
        rows = [rec(1, 0, 3, e=360), rec(1, 1, 4), rec(1, 2, 4)]
        fl = build_flows(pd.DataFrame(rows))
        assert fl.ee_dense()[0, 1] == 0.5
        assert fl.L.sum() == 1.0

    def test_nonneg_and_zero_diagonal(self):
        fl = FlowMatrices.from_dense(np.array([[3.0, 1.0], [2.0, 5.0]]), [0, 0], [1, 1], [1, 1], 1)
        assert fl.ee.diagonal().sum() == 0


class TestSCC:
    def test_cycle(self):
        A = sp.csr_matrix(np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=float))
        assert [len(c) for c in strongly_connected_components(A)] == [3]

    def test_chain(self):
        A = sp.csr_matrix(np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]], dtype=float))
        assert sorted(len(c) for c in strongly_connected_components(A)) == [1, 1, 1]

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_transitive_closure(self, seed):
        g = np.random.default_rng(seed)
        n = 200
        A = (g.random((n, n)) < 1.2 / n).astype(float)
        comps = strongly_connected_components(sp.csr_matrix(A))
        label = np.empty(n, dtype=int)
        for i, c in enumerate(comps):
            label[c] = i
        R = closure(A)
        mutual = R & R.T
        assert np.array_equal(mutual, label[:, None] == label[None, :])
        assert sorted(np.concatenate(comps).tolist()) == list(range(n))


class TestEstimationSet:
    def test_complete_graph(self):
        J = 4
        ee = np.ones((J, J))
        fl = FlowMatrices.from_dense(ee, np.ones(J), np.ones(J), np.ones(J), 1.0)
        assert estimation_set(fl).tolist() == list(range(J))

    def test_non_hiring_dropped_and_recheck(self):
        # 0 -> 1 -> 2 -> 3 -> 0 cycle, plus 1 <-> 2; employer 3 never hires from non-employment
        ee = np.zeros((4, 4))
        ee[0, 1] = ee[1, 2] = ee[2, 3] = ee[3, 0] = ee[2, 1] = 1
        fl = FlowMatrices.from_dense(ee, np.ones(4), [1, 1, 1, 0], np.ones(4), 1.0)
        # removing 3 breaks the cycle through 0, leaving {1, 2}
        assert estimation_set(fl).tolist() == [1, 2]

    def test_idempotent(self):
        g = np.random.default_rng(2)
        J = 30
        ee = (g.random((J, J)) < 0.1) * 1.0
        ne = (g.random(J) < 0.8) * 1.0
        fl = FlowMatrices.from_dense(ee, np.ones(J), ne, np.ones(J), 1.0)
        s1 = estimation_set(fl)
        sub = fl.restrict(s1)
        assert estimation_set(sub).tolist() == s1.tolist()
        assert len(strongly_connected_components(sub.ee)) == 1
        assert np.all(sub.ne > 0)
        assert sub.ee.sum() <= fl.ee.sum()

    def test_empty(self):
        fl = FlowMatrices.from_dense(np.zeros((2, 2)), np.ones(2), np.zeros(2), np.ones(2), 1.0)
        with pytest.raises(IdentificationError):
            estimation_set(fl)


def test_stability_filter():
    rows = []
    for w in range(10):
        rows += [rec(w, 0, 1), rec(w, 1, 1)]
    rows += [rec(50, 0, 2), rec(51, 0, 2)]  # one period only
    rows += [rec(60 + w, t, 3) for w in range(3) for t in range(2)]  # too few workers
    keep = stability_filter(pd.DataFrame(rows))
    assert keep.tolist() == [1]
