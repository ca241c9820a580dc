import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from causalmol.evaluation import (conditional_mi, consistency_jsd, explanation_quality, fidelity, jsd, kmeans,
                                  plugin_cmi, property_similarity, roc_auc, select_explanation)

sklearn_metrics = pytest.importorskip("sklearn.metrics")


def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert roc_auc([0.1, 0.2, 0.9], [1, 1, 0]) == 0.0
    assert roc_auc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == 0.75
    assert roc_auc([0.5, 0.5], [1, 0]) == 0.5
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(4, 40))
def test_auc_matches_sklearn_and_is_rank_invariant(seed, n):
    rng = np.random.default_rng(seed)
    y = np.r_[1, 0, rng.integers(0, 2, n - 2)]
    s = np.round(rng.normal(size=n), 1)  # rounding forces ties
    a = roc_auc(s, y)
    assert a == pytest.approx(sklearn_metrics.roc_auc_score(y, s), abs=1e-12)
    assert roc_auc(np.exp(3 * s) + 1, y) == pytest.approx(a, abs=1e-12)


def test_select_explanation():
    assert len(select_explanation([0.1, 0.9, 0.3, 0.4]).selected_atoms) == 2
    assert select_explanation([0.1, 0.9, 0.3, 0.4]).selected_atoms == [1, 3]
    assert select_explanation([0.5] * 6).selected_atoms == [0, 1, 2]
    assert len(select_explanation(np.arange(5.0)).selected_atoms) == 3
    assert select_explanation([0.2, 0.7, 0.7, 0.1], 0.25).selected_atoms == [1]
    with pytest.raises(ValueError):
        select_explanation([])
    with pytest.raises(ValueError):
        select_explanation([0.3], 0.0)


def test_explanation_quality():
    assert explanation_quality([1, 2], [1, 2]) == (1, 1, 1)
    assert explanation_quality([1], [2]) == (0, 0, 0)
    p, r, f = explanation_quality([1, 2, 3], [2, 3, 4])
    assert (p, r, f) == pytest.approx((2 / 3, 2 / 3, 2 / 3))


def test_fidelity_limits():
    weights = np.array([0.5, -1.0, 2.0])
    predict = lambda m: 1 / (1 + np.exp(-(weights * m).sum()))
    fp, fm = fidelity(predict, 3, [0, 1, 2], 1)
    assert fm == 0.0
    fp, fm = fidelity(predict, 3, [], 0)
    assert fp == 0.0
    fp, fm = fidelity(predict, 3, [2], 1)
    assert fp > 0 > fm


def test_jsd_examples_and_properties():
    assert jsd([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert jsd([1, 0], [0, 1]) == 1.0
    expect = 0.5 * math.log2(2 / 1.5) * 1 + 0.5 * (0.5 * math.log2(0.5 / 0.75) + 0.5 * math.log2(0.5 / 0.25))
    assert jsd([1, 0], [0.5, 0.5]) == pytest.approx(expect, abs=1e-12)
    assert jsd([1, 0], [0.5, 0.5]) == pytest.approx(0.3113, abs=1e-4)
    for bad in ([0.5, 0.6], [-0.1, 1.1]):
        with pytest.raises(ValueError):
            jsd(bad, [0.5, 0.5])
    with pytest.raises(ValueError):
        jsd([1.0], [0.5, 0.5])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 8))
def test_jsd_symmetric_bounded(seed, n):
    rng = np.random.default_rng(seed)
    P, Q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
    a = jsd(P, Q)
    assert a == pytest.approx(jsd(Q, P), abs=1e-15)
    assert 0 < a <= 1


def test_consistency_jsd():
    e = np.array([[1.0, 2.0, 3.0]] * 3)
    assert consistency_jsd({"a": e}) == {"a": 0.0}
    far = np.array([[50.0, 0.0], [0.0, 50.0]])
    assert consistency_jsd({"a": far})["a"] > 0.999
    assert consistency_jsd({"solo": e[:1]}) == {}


def test_property_similarity_hand_case():
    sets = {"a": {"x", "y"}, "b": {"y", "z"}, "c": {"w"}}
    emb = {k: np.random.default_rng(i).normal(size=(3, 4)) for i, k in enumerate(sets)}
    J, I, r, rho, props = property_similarity(sets, emb)
    np.testing.assert_allclose(J, [[1, 1 / 3, 0], [1 / 3, 1, 0], [0, 0, 1]])
    np.testing.assert_allclose(np.diag(I), 1.0)
    assert props == ["a", "b", "c"]
    # one matrix correlated with itself
    from causalmol.evaluation import correlation
    x = J[~np.eye(3, dtype=bool)]
    assert correlation(x, x) == pytest.approx((1.0, 1.0))
    with pytest.raises(ValueError):
        property_similarity({"a": {"x"}}, {"a": np.ones((2, 2))})
    J, *_ = property_similarity({"a": set(), "b": {"x"}}, {"a": np.ones((1, 2)), "b": np.ones((1, 2))})
    assert np.all(J[0] == 0)


def test_cmi_independent_construction():
    rng = np.random.default_rng(0)
    n = 4000
    c = rng.normal(size=(n, 2)) + 4 * rng.integers(0, 2, size=(n, 1))
    y = (c[:, 0] > 2).astype(int) ^ (rng.uniform(size=n) < 0.1)
    s = rng.normal(size=(n, 2))  # independent of y given c
    res = conditional_mi(c, s, y, 8, np.random.default_rng(1))
    assert res.cmi < 0.05
    assert res.identity_gap < 1e-9


def test_cmi_deterministic_labels_reach_entropy():
    rng = np.random.default_rng(0)
    n = 800
    cluster = rng.integers(0, 2, n)
    s = cluster[:, None] * np.array([10.0, 10.0]) + 0.1 * rng.normal(size=(n, 2))
    c = np.zeros((n, 2))
    res = conditional_mi(c, s, cluster, 8, np.random.default_rng(0))
    p = cluster.mean()
    h = -(p * math.log(p) + (1 - p) * math.log(1 - p))
    assert res.k_c == 1 and res.k_s >= 2
    assert res.cmi == pytest.approx(h, abs=1e-9)
    assert res.identity_gap < 1e-9


def test_cmi_needs_samples():
    with pytest.raises(ValueError):
        conditional_mi(np.zeros((10, 2)), np.zeros((10, 2)), np.zeros(10), 8)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_plugin_cmi_non_negative_and_chain_rule(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 200))
    s, y, c = rng.integers(0, 3, n), rng.integers(0, 2, n), rng.integers(0, 4, n)
    from causalmol.evaluation import cmi_direct, plugin_mi
    d = cmi_direct(s, y, c)
    assert d >= -1e-12
    assert abs(d - (plugin_mi([s], [y, c]) - plugin_mi([s], [c]))) < 1e-9
    assert abs(d - plugin_cmi(s, y, c)) < 1e-9


def test_kmeans_deterministic_and_reindexed():
    X = np.r_[np.zeros((5, 2)), np.ones((5, 2)) * 10]
    a = kmeans(X, 8, np.random.default_rng(0))
    b = kmeans(X, 8, np.random.default_rng(0))
    np.testing.assert_array_equal(a, b)
    assert set(a) == {0, 1}
