import itertools

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from jobvalues.cluster import canonical_labels, choose_g, cluster_employers, kmeans, standardize
from jobvalues.errors import ContractError


def exhaustive_optimum(X, w, G):
    """Smallest weighted within-cluster sum of squares over all partitions
    (first point fixed in cluster 0 to cut label symmetry)."""
    J = len(X)
    rest = np.array(list(itertools.product(range(G), repeat=J - 1)), dtype=np.int8)
    L = np.c_[np.zeros(len(rest), dtype=np.int8), rest]
    total = np.zeros(len(L))
    used = np.zeros(len(L), dtype=int)
    xx = (w[:, None] * X ** 2).sum(1)
    for g in range(G):
        m = (L == g).astype(float)
        mass = m @ w
        s = m @ (w[:, None] * X)
        used += mass > 0
        total += m @ xx - np.divide((s ** 2).sum(1), mass, out=np.zeros_like(mass), where=mass > 0)
    return float(total[used == G].min())


def test_choose_g_register_scale():
    assert choose_g(78_133, 50) == 1563


@pytest.mark.parametrize("J,expected", [(1, 1), (24, 1), (25, 1), (75, 2), (100, 2), (125, 2), (126, 3)])
def test_choose_g_rounding(J, expected):
    assert choose_g(J, 50) == expected


def test_choose_g_rejects_bad_input():
    with pytest.raises(ContractError):
        choose_g(0)
    with pytest.raises(ContractError):
        choose_g(10, 0)


def test_single_cluster_is_weighted_mean():
    g = np.random.default_rng(0)
    X, w = g.normal(size=(30, 3)), g.uniform(0.1, 2, 30)
    res = kmeans(X, 1, w, seed=1, n_init=2)
    assert np.all(res.labels == 0)
    np.testing.assert_allclose(res.centroids[0], (w[:, None] * X).sum(0) / w.sum(), atol=1e-12)


def test_recovers_well_separated_partition():
    g = np.random.default_rng(1)
    centers = np.array([[0, 0], [20, 0], [0, 20]])
    truth = np.repeat([0, 1, 2], 15)
    X = centers[truth] + g.normal(scale=0.5, size=(45, 2))
    res = kmeans(X, 3, seed=3, n_init=5)
    np.testing.assert_array_equal(res.labels, canonical_labels(truth))


@pytest.mark.parametrize("seed", range(3))
def test_matches_exhaustive_partition_small_instance(seed):
    g = np.random.default_rng(seed)
    X = np.r_[g.normal(0, 1, (4, 2)), g.normal(4, 1, (4, 2)), g.normal([0, 5], 1, (4, 2))]
    w = g.uniform(0.5, 2.0, 12)
    best = exhaustive_optimum(X, w, 3)
    res = kmeans(X, 3, w, seed=seed, n_init=20)
    assert res.objective == pytest.approx(best, rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_lloyd_objective_never_increases(seed, G):
    g = np.random.default_rng(seed)
    X = g.normal(size=(25, 3))
    w = g.uniform(0, 3, 25)
    w[0] = 1.0
    res = kmeans(X, G, w, seed=seed, n_init=3)
    for log in res.history:
        assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(log, log[1:]))


def test_permutation_invariance_of_partition():
    g = np.random.default_rng(4)
    X = np.r_[g.normal(0, 0.3, (10, 2)), g.normal(5, 0.3, (10, 2)), g.normal([5, -5], 0.3, (10, 2))]
    perm = g.permutation(30)
    a = kmeans(X, 3, seed=0).labels
    b = kmeans(X[perm], 3, seed=0).labels
    # same partition, possibly different numbering
    assert len(set(zip(a[perm], b))) == 3


def test_labels_are_canonical():
    g = np.random.default_rng(5)
    res = kmeans(g.normal(size=(40, 2)), 4, seed=2)
    first = [int(np.flatnonzero(res.labels == k)[0]) for k in range(4)]
    assert first == sorted(first)


def test_deterministic_given_seed():
    X = np.random.default_rng(6).normal(size=(50, 4))
    a, b = kmeans(X, 5, seed=9), kmeans(X, 5, seed=9)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.objective == b.objective


def test_contract_errors():
    X = np.zeros((5, 2))
    with pytest.raises(ContractError):
        kmeans(X, 6)
    with pytest.raises(ContractError):
        kmeans(X, 2, weights=-np.ones(5))
    with pytest.raises(ContractError):
        kmeans(np.full((5, 2), np.nan), 2)


def test_standardize_skips_indicators():
    df = pd.DataFrame({"x": [1.0, 2.0, 3.0, 6.0], "ind_a": [1.0, 0, 0, 1]})
    w = np.array([1.0, 2.0, 1.0, 1.0])
    out = standardize(df, w)
    assert np.sum(w * out["x"]) == pytest.approx(0, abs=1e-12)
    assert np.sum(w * out["x"] ** 2) / w.sum() == pytest.approx(1)
    np.testing.assert_array_equal(out["ind_a"], df["ind_a"])


def test_cluster_employers_indexes_by_id():
    df = pd.DataFrame({"x": [0.0, 0.1, 9.0, 9.1]}, index=pd.Index([7, 3, 11, 5], name="establishment_id"))
    labels, _ = cluster_employers(df, np.ones(4), 2, seed=0)
    assert list(labels.index) == [7, 3, 11, 5]
    assert labels[7] == labels[3] != labels[11] == labels[5]
