"""
Regression Trees
CART-style recursive binary splitting with pluggable split gains, and the
gradient trees used by the boosting step (leaf values are truncated
Newton-Raphson steps)
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import PreconditionError

logger = logging.getLogger(__name__)

# Bound on the absolute value of a gradient-tree leaf
NEWTON_STEP_BOUND = 1.0

# Newton denominators at or below this are treated as unusable curvature
HESSIAN_FLOOR = 1e-12

GainFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]


class RegressionTree:
    """
    Binary tree stored as flat node arrays

    Node 0 is the root. Internal nodes have feature >= 0; leaves have
    feature == -1. ``gain`` holds the impurity decrease recorded at each
    split (0 for leaves). A point goes left iff x[feature] <= threshold.
    """

    def __init__(self, feature, threshold, left, right, value, gain, n_node, depth: int):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=float)
        self.gain = np.asarray(gain, dtype=float)
        self.n_node = np.asarray(n_node, dtype=np.int64)
        self.depth = int(depth)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.is_leaf))

    def apply(self, X) -> np.ndarray:
        """Index of the leaf containing each row of X"""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        rows = np.arange(len(X))
        node = np.zeros(len(X), dtype=np.int64)
        for _ in range(self.depth):
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                break
            go_left = X[rows, np.maximum(feat, 0)] <= self.threshold[node]
            child = np.where(go_left, self.left[node], self.right[node])
            node = np.where(internal, child, node)
        return node

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def split_gains(self) -> Tuple[np.ndarray, np.ndarray]:
        """Features and recorded gains of all internal nodes"""
        internal = ~self.is_leaf
        return self.feature[internal], self.gain[internal]

    def with_values(self, value) -> "RegressionTree":
        return RegressionTree(self.feature, self.threshold, self.left, self.right,
                              value, self.gain, self.n_node, self.depth)


def variance_gain(y: np.ndarray, order: np.ndarray) -> np.ndarray:
    """
    RSS decrease of every candidate split

    Args:
        y: Node targets, shape (n,)
        order: Per-feature argsort of the node rows, shape (n, m)

    Returns:
        Gains of shape (n - 1, m); row k splits after the (k+1)-th sorted value
    """
    n = len(y)
    yc = y - y.mean()
    total = yc.sum()
    left_sum = np.cumsum(yc[order], axis=0)[:-1]
    n_left = np.arange(1, n, dtype=float)[:, None]
    return left_sum ** 2 / n_left + (total - left_sum) ** 2 / (n - n_left) - total ** 2 / n


def _best_split(X_node: np.ndarray, y_node: np.ndarray, features: np.ndarray,
                min_leaf: int, gain_fn: GainFunction) -> Optional[Tuple[int, float, float]]:
    """Best (feature, threshold, gain) over the candidate features, or None"""
    n = len(y_node)
    Xs = X_node[:, features]
    order = np.argsort(Xs, axis=0, kind="stable")
    xs = np.take_along_axis(Xs, order, axis=0)

    gains = gain_fn(y_node, order)
    n_left = np.arange(1, n)
    size_ok = (n_left >= min_leaf) & (n - n_left >= min_leaf)
    valid = (xs[1:] > xs[:-1]) & size_ok[:, None]
    gains = np.where(valid, gains, -np.inf)

    # first maximum within a feature = lowest threshold
    best_pos = np.argmax(gains, axis=0)
    best_gain = gains[best_pos, np.arange(len(features))]
    top = best_gain.max()
    if not np.isfinite(top) or top <= 0:
        return None

    # features are ascending, so the first near-maximal one is the lowest index
    tol = 1e-12 * max(1.0, abs(top))
    j = int(np.flatnonzero(best_gain >= top - tol)[0])
    pos = best_pos[j]
    lo, hi = xs[pos, j], xs[pos + 1, j]
    threshold = 0.5 * (lo + hi)
    if not lo <= threshold < hi:
        threshold = lo
    return int(features[j]), float(threshold), float(best_gain[j])


def grow_tree(X, targets, max_depth: Optional[int], min_leaf: int, gain_fn: GainFunction = variance_gain,
              rng: Optional[np.random.Generator] = None, feature_subset_size: Optional[int] = None,
              ) -> Tuple[RegressionTree, Dict[int, np.ndarray]]:
    """
    Grow a tree structure by recursive binary splitting

    A node is split when it is shallower than max_depth, its targets are not
    constant, and some split leaves at least min_leaf rows on each side with
    a positive gain. Ties go to the lowest feature index, then the lowest
    threshold.

    Args:
        X: Covariates, shape (n, d)
        targets: Values the gain function sees, shape (n,)
        max_depth: Maximum depth (None for unbounded)
        min_leaf: Minimum rows per leaf
        gain_fn: Split gain, see variance_gain
        rng: Stream for per-node feature sampling
        feature_subset_size: Features sampled per node (None or d for all)

    Returns:
        (tree with zero leaf values, mapping leaf node -> row indices)
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(targets, dtype=float)
    n, d = X.shape
    if n < max(min_leaf, 1):
        raise PreconditionError(f"cannot grow a tree on {n} rows with min_leaf={min_leaf}")

    depth_limit = np.inf if max_depth is None else max_depth
    m = d if feature_subset_size is None else min(max(int(feature_subset_size), 1), d)
    if m < d and rng is None:
        rng = np.random.default_rng()
    all_features = np.arange(d)

    feature: List[int] = [-1]
    threshold: List[float] = [np.nan]
    left: List[int] = [-1]
    right: List[int] = [-1]
    gain: List[float] = [0.0]
    n_node: List[int] = [n]
    leaves: Dict[int, np.ndarray] = {}
    reached = 0

    stack = [(0, np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        reached = max(reached, depth)
        y_node = y[idx]
        split = None
        if depth < depth_limit and len(idx) >= 2 * min_leaf and np.ptp(y_node) > 0:
            features = all_features if m == d else np.sort(rng.choice(d, size=m, replace=False))
            split = _best_split(X[idx], y_node, features, min_leaf, gain_fn)

        if split is None:
            leaves[node] = idx
            continue

        feat, thr, g = split
        go_left = X[idx, feat] <= thr
        left_id, right_id = len(feature), len(feature) + 1
        for child_idx in (idx[go_left], idx[~go_left]):
            feature.append(-1)
            threshold.append(np.nan)
            left.append(-1)
            right.append(-1)
            gain.append(0.0)
            n_node.append(len(child_idx))
        feature[node], threshold[node], gain[node] = feat, thr, max(g, 0.0)
        left[node], right[node] = left_id, right_id

        stack.append((right_id, idx[~go_left], depth + 1))
        stack.append((left_id, idx[go_left], depth + 1))

    tree = RegressionTree(feature, threshold, left, right, np.zeros(len(feature)), gain, n_node, reached)
    return tree, leaves


def fit_regression_tree(X, targets, max_depth: int, min_leaf: int,
                        rng: Optional[np.random.Generator] = None,
                        feature_subset_size: Optional[int] = None) -> RegressionTree:
    """Least-squares regression tree (leaf value = mean target)"""
    y = np.asarray(targets, dtype=float)
    tree, leaves = grow_tree(X, y, max_depth, min_leaf, variance_gain, rng, feature_subset_size)
    value = np.zeros(tree.n_nodes)
    for node, idx in leaves.items():
        value[node] = y[idx].mean()
    return tree.with_values(value)


def newton_leaf_value(grads: np.ndarray, hessians: np.ndarray) -> float:
    """Truncated Newton-Raphson step -sum(g)/sum(h), bounded by NEWTON_STEP_BOUND"""
    h_sum = float(np.sum(hessians))
    if h_sum <= HESSIAN_FLOOR:
        step = -float(np.mean(grads))
    else:
        step = -float(np.sum(grads)) / h_sum
    return float(np.sign(step) * min(abs(step), NEWTON_STEP_BOUND))


def fit_gradient_tree(X, grads, hessians, max_depth: int, min_leaf: int,
                      rng: Optional[np.random.Generator] = None,
                      feature_subset_size: Optional[int] = None) -> RegressionTree:
    """
    Gradient tree for one boosting iteration

    The structure is the least-squares tree on the gradients; each leaf
    carries the truncated Newton step of the rows it holds.
    """
    g = np.asarray(grads, dtype=float)
    h = np.asarray(hessians, dtype=float)
    tree, leaves = grow_tree(X, g, max_depth, min_leaf, variance_gain, rng, feature_subset_size)
    value = np.zeros(tree.n_nodes)
    for node, idx in leaves.items():
        value[node] = newton_leaf_value(g[idx], h[idx])
    return tree.with_values(value)


def predict_tree(tree: RegressionTree, x) -> float:
    """Leaf value of a single point"""
    return float(tree.predict(np.asarray(x, dtype=float).reshape(1, -1))[0])


_PACKED_FIELDS = ("feature", "threshold", "left", "right", "value", "gain", "n_node")


def pack_trees(trees: Sequence[RegressionTree], prefix: str) -> Dict[str, np.ndarray]:
    """Concatenate node arrays of many trees for storage"""
    sizes = np.array([t.n_nodes for t in trees], dtype=np.int64)
    arrays = {f"{prefix}offsets": np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64),
              f"{prefix}depth": np.array([t.depth for t in trees], dtype=np.int64)}
    for name in _PACKED_FIELDS:
        parts = [getattr(t, name) for t in trees]
        dtype = float if name in ("threshold", "value", "gain") else np.int64
        arrays[f"{prefix}{name}"] = np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)
    return arrays


def unpack_trees(arrays: Dict[str, np.ndarray], prefix: str) -> List[RegressionTree]:
    """Inverse of pack_trees"""
    offsets = arrays[f"{prefix}offsets"]
    depths = arrays[f"{prefix}depth"]
    trees = []
    for k in range(len(depths)):
        lo, hi = offsets[k], offsets[k + 1]
        fields = [arrays[f"{prefix}{name}"][lo:hi] for name in _PACKED_FIELDS]
        trees.append(RegressionTree(*fields, depth=int(depths[k])))
    return trees
