import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from connectoscope.classical_ml import (
    DecisionTree,
    Forest,
    ForestConfig,
    MetricsReport,
    best_split,
    compute_metrics,
    entropy,
    fit_forest,
    fit_tree,
    predict_proba,
)
from connectoscope.errors import AllZero, LengthMismatch, NoSplit, SingleClass


def brute_force_split(X, y):
    """Every candidate midpoint scored with a plain loop."""

    def h(labels):
        if not labels:
            return 0.0
        p = sum(labels) / len(labels)
        return -sum(q * math.log2(q) for q in (p, 1 - p) if q > 0)

    parent = h(list(y))
    best = (None, None, -1.0)
    for f in range(X.shape[1]):
        values = sorted(set(X[:, f]))
        for lo, hi in zip(values, values[1:]):
            t = (lo + hi) / 2
            left = [int(y[i]) for i in range(len(y)) if X[i, f] <= t]
            right = [int(y[i]) for i in range(len(y)) if X[i, f] > t]
            gain = parent - (len(left) * h(left) + len(right) * h(right)) / len(y)
            if gain > best[2] + 1e-12:
                best = (f, t, gain)
    return best


def test_entropy_examples():
    assert entropy([5, 5]) == 1.0
    assert entropy([10, 0]) == 0.0
    assert entropy([9, 3]) == pytest.approx(0.8113, abs=5e-5)
    assert entropy([9, 3]) == pytest.approx(stats.entropy([9, 3], base=2), rel=1e-14)
    with pytest.raises(AllZero):
        entropy([0, 0])


@given(a=st.integers(0, 50), b=st.integers(0, 50))
def test_entropy_extremes(a, b):
    if a + b == 0:
        return
    h = entropy([a, b])
    assert 0.0 <= h <= 1.0 + 1e-15
    assert (h == 1.0) == (a == b)
    assert (h == 0.0) == (a == 0 or b == 0)


def test_best_split_examples():
    f, t, gain = best_split(np.array([[1.0], [2.0], [3.0], [4.0]]), np.array([0, 0, 1, 1]))
    assert (f, t, gain) == (0, 2.5, 1.0)
    with pytest.raises(NoSplit):
        best_split(np.full((4, 1), 3.0), np.array([0, 1, 0, 1]))
    with pytest.raises(NoSplit):
        best_split(np.array([[1.0], [2.0]]), np.array([1, 1]))
    twin = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]])
    assert best_split(twin, np.array([0, 0, 1, 1]))[0] == 0
    # equal gain at two thresholds of one feature resolves to the lower one
    assert best_split(np.array([[1.0], [2.0], [3.0]]), np.array([0, 1, 0]))[1] == 1.5


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_best_split_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 5, size=(10, 3)).astype(float)
    y = rng.integers(0, 2, size=10)
    ref = brute_force_split(X, y)
    if ref[2] <= 1e-12:
        with pytest.raises(NoSplit):
            best_split(X, y)
        return
    f, t, gain = best_split(X, y)
    assert gain == pytest.approx(ref[2], abs=1e-12)
    assert (f, t) == ref[:2]
    assert gain > 0


def test_forest_fits_separable_data_and_is_deterministic():
    rng = np.random.default_rng(0)
    y = np.arange(30) % 2
    X = np.column_stack([y + rng.uniform(-0.4, 0.4, 30), rng.normal(size=30)])
    cfg = ForestConfig(n_trees=25, seed=3)
    forest = fit_forest(X, y, cfg)
    assert np.array_equal(forest.predict(X), y)
    probe = rng.normal(size=(10, 2))
    assert np.array_equal(fit_forest(X, y, cfg).predict_proba(probe), forest.predict_proba(probe))
    assert all(t.depth <= 6 for t in forest.trees)
    back = Forest.from_dict(forest.to_dict())
    assert np.array_equal(back.predict_proba(probe), forest.predict_proba(probe))


def test_config_echo_and_validation():
    echo = ForestConfig().echo()
    assert (echo["max_depth"], echo["n_trees"], echo["max_features_per_split"]) == (6, 500, 96)
    assert echo["criterion"] == "entropy" and echo["bootstrap"]
    with pytest.raises(ValueError):
        ForestConfig(max_depth=0)
    with pytest.raises(SingleClass):
        fit_forest(np.zeros((4, 2)), [1, 1, 1, 1])


def constant_tree(v):
    return DecisionTree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([v]))


def test_vote_fractions():
    X = np.zeros((3, 1))
    unanimous = Forest([constant_tree(1)] * 4, ForestConfig(n_trees=4))
    assert predict_proba(unanimous, X).tolist() == [1.0] * 3
    half = Forest([constant_tree(1)] * 250 + [constant_tree(0)] * 250, ForestConfig())
    assert predict_proba(half, X)[0] == 0.5
    assert half.predict(X).tolist() == [1, 1, 1]


def test_single_tree_forest_matches_traversal():
    X = np.array([[0.0, 5.0], [1.0, 3.0], [2.0, 1.0], [3.0, 4.0]])
    y = np.array([0, 0, 1, 1])
    forest = fit_forest(X, y, ForestConfig(n_trees=1, bootstrap=False))
    tree = forest.trees[0]
    for row in X:
        node = 0
        while tree.feature[node] >= 0:
            node = tree.left[node] if row[tree.feature[node]] <= tree.threshold[node] else tree.right[node]
        assert predict_proba(forest, row[None])[0] == tree.value[node]


def test_depth_cap_on_noisy_labels():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 5))
    y = rng.integers(0, 2, size=200)
    assert fit_tree(X, y, max_depth=6).depth == 6
    assert fit_tree(X, y, max_depth=2).depth == 2


def test_forest_usually_beats_one_tree():
    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        y = np.arange(60) % 2
        X = rng.normal(size=(60, 8)) + 0.8 * y[:, None] * (np.arange(8) < 3)
        forest = fit_forest(X, y, ForestConfig(n_trees=100, max_features_per_split=3, seed=seed))
        single = fit_forest(X, y, ForestConfig(n_trees=1, max_features_per_split=3, seed=seed))
        wins += np.mean(forest.predict(X) == y) >= np.mean(single.predict(X) == y)
    assert wins >= 18


def test_metric_examples():
    r = compute_metrics([1, 0, 1], [1, 0, 1])
    assert (r.accuracy, r.sensitivity, r.specificity) == (1.0, 1.0, 1.0)
    r = MetricsReport.from_counts(tp=10, fp=3, tn=5, fn=2)
    assert r.accuracy == 0.75
    assert r.sensitivity == pytest.approx(0.8333, abs=5e-5) and r.specificity == 0.625
    with pytest.raises(LengthMismatch):
        compute_metrics([1, 0], [1])
    empty_neg = compute_metrics([1, 1], [1, 1])
    assert empty_neg.specificity is None and "specificity" not in empty_neg.to_dict()
    assert "specificity=NA" in empty_neg.render()


def test_render_fixture():
    r = MetricsReport(tp=91, fp=46, tn=54, fn=9, accuracy=0.77, sensitivity=0.91, specificity=0.54)
    assert r.render() == "accuracy=0.770 sensitivity=0.910 specificity=0.540 tp=91 fp=46 tn=54 fn=9"


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 40))
def test_metrics_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    pred, true = rng.integers(0, 2, n), rng.integers(0, 2, n)
    perm = rng.permutation(n)
    assert compute_metrics(pred, true) == compute_metrics(pred[perm], true[perm])
