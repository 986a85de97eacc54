"""Tests for regression and gradient trees"""

import numpy as np
import pytest

from core.errors import PreconditionError
from core.trees import (NEWTON_STEP_BOUND, fit_gradient_tree, fit_regression_tree, grow_tree, newton_leaf_value,
                        pack_trees, predict_tree, unpack_trees, variance_gain)


class TestRegressionTree:
    """Least-squares tree growth"""

    def test_recovers_step(self, rng):
        X = rng.uniform(-1, 1, size=(200, 3))
        y = np.where(X[:, 1] > 0.2, 5.0, -1.0)
        tree = fit_regression_tree(X, y, max_depth=1, min_leaf=5)
        assert tree.feature[0] == 1
        assert tree.threshold[0] == pytest.approx(0.2, abs=0.05)
        np.testing.assert_allclose(tree.predict(X), y)

    def test_depth_zero_is_constant(self, rng):
        X = rng.normal(size=(50, 2))
        y = rng.normal(size=50)
        tree = fit_regression_tree(X, y, max_depth=0, min_leaf=1)
        assert tree.n_nodes == 1
        assert predict_tree(tree, X[0]) == pytest.approx(y.mean())

    def test_constant_target_not_split(self, rng):
        X = rng.normal(size=(30, 2))
        tree = fit_regression_tree(X, np.full(30, 2.0), max_depth=3, min_leaf=1)
        assert tree.n_leaves == 1

    def test_respects_min_leaf(self, rng):
        X = rng.normal(size=(100, 2))
        y = X[:, 0] + rng.normal(scale=0.1, size=100)
        tree = fit_regression_tree(X, y, max_depth=6, min_leaf=12)
        leaves = tree.apply(X)
        assert np.bincount(leaves)[np.unique(leaves)].min() >= 12

    def test_midpoint_threshold(self):
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        y = np.array([0.0, 0.0, 1.0, 1.0])
        tree = fit_regression_tree(X, y, max_depth=1, min_leaf=1)
        assert tree.threshold[0] == 1.5

    def test_ties_go_to_lowest_feature(self):
        """Identical columns give the same gain; the first wins"""
        x = np.arange(10, dtype=float)
        X = np.column_stack([x, x, x])
        y = (x > 4).astype(float)
        tree = fit_regression_tree(X, y, max_depth=1, min_leaf=1)
        assert tree.feature[0] == 0

    def test_records_rss_decrease(self):
        x = np.arange(8, dtype=float)
        y = np.array([0, 0, 0, 0, 2, 2, 2, 2], dtype=float)
        tree = fit_regression_tree(x[:, None], y, max_depth=1, min_leaf=1)
        features, gains = tree.split_gains()
        assert list(features) == [0]
        # total sum of squares around the mean 1
        assert gains[0] == pytest.approx(8.0)

    def test_too_few_rows(self):
        with pytest.raises(PreconditionError):
            grow_tree(np.zeros((3, 1)), np.zeros(3), 2, min_leaf=5)


class TestVarianceGain:
    """Vectorised split gains"""

    def test_matches_direct_computation(self, rng):
        y = rng.normal(size=12)
        order = np.argsort(rng.normal(size=(12, 2)), axis=0)
        gains = variance_gain(y, order)
        rss = lambda v: np.sum((v - v.mean()) ** 2)
        for j in range(2):
            for k in range(11):
                left, right = y[order[:k + 1, j]], y[order[k + 1:, j]]
                assert gains[k, j] == pytest.approx(rss(y) - rss(left) - rss(right), abs=1e-10)


class TestGradientTree:
    """Newton leaf values"""

    def test_leaf_is_newton_step(self):
        assert newton_leaf_value(np.array([0.2, 0.4]), np.array([1.0, 2.0])) == pytest.approx(-0.2)

    def test_leaf_is_bounded(self):
        assert newton_leaf_value(np.array([5.0, 5.0]), np.array([0.1, 0.1])) == -NEWTON_STEP_BOUND
        assert newton_leaf_value(np.array([-5.0]), np.array([0.1])) == NEWTON_STEP_BOUND

    def test_degenerate_curvature(self):
        """Non-positive curvature falls back to the bounded mean gradient step"""
        assert newton_leaf_value(np.array([0.3, 0.1]), np.array([-1.0, 0.5])) == pytest.approx(-0.2)
        assert newton_leaf_value(np.array([3.0]), np.array([0.0])) == -1.0

    def test_structure_follows_gradients(self, rng):
        X = rng.uniform(-1, 1, size=(100, 2))
        g = np.where(X[:, 0] > 0, 1.0, -1.0)
        h = np.full(100, 2.0)
        tree = fit_gradient_tree(X, g, h, max_depth=1, min_leaf=5)
        assert tree.feature[0] == 0
        np.testing.assert_allclose(tree.predict(X), -g / 2.0)


class TestPacking:
    """Flat storage of many trees"""

    def test_pack_and_unpack(self, rng):
        X = rng.normal(size=(60, 3))
        trees = [fit_regression_tree(X, X[:, k] + rng.normal(size=60), max_depth=2, min_leaf=3) for k in range(3)]
        restored = unpack_trees(pack_trees(trees, "t_"), "t_")
        assert len(restored) == 3
        for a, b in zip(trees, restored):
            np.testing.assert_array_equal(a.predict(X), b.predict(X))
            assert a.depth == b.depth


def _best_root_split(X, y, min_leaf):
    """Exhaustive search: (feature, threshold, gain) by direct RSS, ties to lowest feature then threshold"""
    rss = lambda v: np.sum((v - v.mean()) ** 2)
    total = rss(y)
    per_feature = []
    for j in range(X.shape[1]):
        values = np.unique(X[:, j])
        best = (-np.inf, None)
        for lo, hi in zip(values[:-1], values[1:]):
            thr = 0.5 * (lo + hi)
            go_left = X[:, j] <= thr
            if go_left.sum() < min_leaf or (~go_left).sum() < min_leaf:
                continue
            gain = total - rss(y[go_left]) - rss(y[~go_left])
            if gain > best[0] + 1e-9:
                best = (gain, thr)
        per_feature.append(best)
    top = max(g for g, _ in per_feature)
    j = next(k for k, (g, _) in enumerate(per_feature) if g >= top - 1e-9)
    return j, per_feature[j][1], per_feature[j][0]


def _leaf_paths(tree):
    """Root-to-leaf conditions (feature, threshold, goes_left) for every leaf"""
    paths = {}
    stack = [(0, [])]
    while stack:
        node, conditions = stack.pop()
        if tree.left[node] < 0:
            paths[node] = conditions
            continue
        f, t = tree.feature[node], tree.threshold[node]
        stack.append((tree.left[node], conditions + [(f, t, True)]))
        stack.append((tree.right[node], conditions + [(f, t, False)]))
    return paths


class TestExhaustiveSplit:
    """Root split against a brute-force search"""

    @pytest.mark.parametrize("seed,n,min_leaf", [(0, 12, 1), (1, 20, 2), (2, 30, 1), (3, 30, 4), (4, 25, 3)])
    def test_matches_brute_force(self, seed, n, min_leaf):
        rng = np.random.default_rng(seed)
        X = rng.integers(0, 5, size=(n, 3)).astype(float)
        # column 3 induces the same partitions as column 1
        X = np.column_stack([X, 2.0 * X[:, 1] + 1.0])
        y = rng.normal(size=n)
        tree = fit_regression_tree(X, y, max_depth=1, min_leaf=min_leaf)
        feature, threshold, gain = _best_root_split(X, y, min_leaf)
        assert tree.feature[0] == feature
        assert tree.threshold[0] == threshold
        assert tree.gain[0] == pytest.approx(gain, rel=1e-9, abs=1e-12)
        assert tree.feature[0] != 3

    def test_duplicate_column_never_wins(self):
        rng = np.random.default_rng(9)
        x = rng.integers(0, 6, size=24).astype(float)
        X = np.column_stack([rng.normal(size=24) * 1e-3, x, x])
        y = x + rng.normal(scale=0.01, size=24)
        tree = fit_regression_tree(X, y, max_depth=1, min_leaf=1)
        assert tree.feature[0] == 1


class TestPartition:
    """Every point lands in exactly one leaf"""

    def test_each_point_in_one_leaf(self, rng):
        X = rng.uniform(-1, 1, size=(300, 3))
        y = np.sin(3 * X[:, 0]) + X[:, 1] * X[:, 2] + rng.normal(scale=0.1, size=300)
        tree = fit_regression_tree(X, y, max_depth=5, min_leaf=3)
        paths = _leaf_paths(tree)
        assert len(paths) == tree.n_leaves

        points = rng.uniform(-1.2, 1.2, size=(1000, 3))
        # include points lying exactly on thresholds
        for k, node in enumerate(np.flatnonzero(tree.feature >= 0)):
            points[k, tree.feature[node]] = tree.threshold[node]
        applied = tree.apply(points)
        for x, leaf in zip(points, applied):
            hits = [node for node, conditions in paths.items()
                    if all((x[f] <= t) == goes_left for f, t, goes_left in conditions)]
            assert hits == [leaf]


class TestLeafBound:
    """Gradient tree leaves stay within the Newton step bound"""

    @pytest.mark.parametrize("seed", range(5))
    def test_all_leaves_bounded(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(200, 3))
        g = rng.standard_cauchy(size=200) * 50.0
        h = rng.exponential(scale=0.01, size=200) - 0.002
        tree = fit_gradient_tree(X, g, h, max_depth=4, min_leaf=2)
        leaves = tree.value[tree.is_leaf]
        assert leaves.size == tree.n_leaves
        assert np.all(np.abs(leaves) <= NEWTON_STEP_BOUND)
        assert NEWTON_STEP_BOUND == 1.0
