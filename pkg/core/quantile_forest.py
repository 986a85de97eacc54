"""
Quantile Forest Module
Honest subsampled random forest for intermediate conditional quantiles.
Trees split on a multiclass recoding of the response; predictions are
weighted empirical quantiles of the training responses, with optional
out-of-bag weights for training rows.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy import sparse

from core.errors import DomainError, PreconditionError
from core.trees import RegressionTree, grow_tree, pack_trees, unpack_trees

logger = logging.getLogger(__name__)

WEIGHT_SUM_TOL = 1e-9

# Trees between DEBUG progress messages
PROGRESS_EVERY = 100

# Query rows handled per block when accumulating dense weight matrices
WEIGHT_BLOCK_ROWS = 256


@dataclass(frozen=True)
class ForestConfig:
    """Forest hyper-parameters"""

    n_trees: int = 500
    fraction: float = 0.5
    mtry: Optional[int] = None
    min_node: int = 5
    class_orders: Tuple[float, ...] = (0.1, 0.5, 0.9)
    honesty: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_orders", tuple(float(t) for t in self.class_orders))
        if self.n_trees < 1:
            raise DomainError(f"forest needs at least one tree, got {self.n_trees}")
        if not 0.0 < self.fraction <= 1.0:
            raise DomainError(f"subsampling fraction must lie in (0, 1], got {self.fraction}")
        if self.min_node < 1:
            raise DomainError(f"min_node must be >= 1, got {self.min_node}")
        if self.mtry is not None and self.mtry < 1:
            raise DomainError(f"mtry must be >= 1, got {self.mtry}")
        orders = np.asarray(self.class_orders)
        if orders.size == 0 or np.any((orders <= 0) | (orders >= 1)) or np.any(np.diff(orders) <= 0):
            raise DomainError("class orders must be increasing and inside (0, 1)")

    def resolve_mtry(self, n_features: int) -> int:
        if self.mtry is None:
            return max(1, math.ceil(math.sqrt(n_features)))
        return min(self.mtry, n_features)

    def to_dict(self) -> Dict:
        values = asdict(self)
        values["class_orders"] = list(self.class_orders)
        return values

    @classmethod
    def from_dict(cls, values: Dict) -> "ForestConfig":
        return cls(**values)


@dataclass
class ForestTree:
    """
    One honest tree

    ``sample`` is the shuffled subsample; its first ``n_split`` entries
    grew the structure and the remaining ones carry the weights. Without
    honesty the whole subsample plays both roles.
    """

    tree: RegressionTree
    sample: np.ndarray
    n_split: int
    honest: bool = True

    @property
    def split_idx(self) -> np.ndarray:
        return self.sample[:self.n_split] if self.honest else self.sample

    @property
    def weight_idx(self) -> np.ndarray:
        return self.sample[self.n_split:] if self.honest else self.sample


def multiclass_split_gain(left_counts: Union[Mapping, Sequence[float]],
                          right_counts: Union[Mapping, Sequence[float]]) -> float:
    """
    Multiclass criterion of a candidate split

    Sum over classes of squared class counts divided by the child size,
    added over both children.
    """
    left = np.asarray(list(left_counts.values()) if isinstance(left_counts, Mapping) else left_counts, dtype=float)
    right = np.asarray(list(right_counts.values()) if isinstance(right_counts, Mapping) else right_counts, dtype=float)
    n_left, n_right = left.sum(), right.sum()
    if n_left <= 0 or n_right <= 0:
        raise DomainError("both children of a split must be nonempty")
    return float(np.sum(left ** 2) / n_left + np.sum(right ** 2) / n_right)


def type1_quantiles(values: np.ndarray, orders: Sequence[float]) -> np.ndarray:
    """Order-statistic quantiles: smallest x with empirical CDF >= order"""
    ordered = np.sort(values)
    n = len(ordered)
    positions = np.clip(np.ceil(n * np.asarray(orders) - 1e-12).astype(int) - 1, 0, n - 1)
    return ordered[positions]


def class_labels(values: np.ndarray, orders: Sequence[float]) -> np.ndarray:
    """Number of node quantiles at or above each value (labels 0..len(orders))"""
    cuts = type1_quantiles(values, orders)
    return np.sum(values[:, None] <= cuts[None, :], axis=1)


def multiclass_gain_fn(orders: Sequence[float]):
    """Split-gain callback for grow_tree based on the multiclass criterion"""
    n_classes = len(orders) + 1

    def gain(y: np.ndarray, order: np.ndarray) -> np.ndarray:
        n = len(y)
        onehot = np.eye(n_classes)[class_labels(y, orders)]
        total = onehot.sum(axis=0)
        left = np.cumsum(onehot[order], axis=0)[:-1]
        n_left = np.arange(1, n, dtype=float)[:, None]
        right = total - left
        crit = np.sum(left ** 2, axis=-1) / n_left + np.sum(right ** 2, axis=-1) / (n - n_left)
        return crit - np.sum(total ** 2) / n

    return gain


def weighted_quantile(values, weights, tau: float) -> float:
    """
    Smallest value whose cumulative weight reaches tau

    This minimises the weighted check loss over the data values.
    """
    v = np.asarray(values, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    if len(v) != len(w) or len(v) == 0:
        raise DomainError("values and weights must be nonempty and of equal length")
    if np.any(w < 0):
        raise DomainError("weights must be nonnegative")
    total = w.sum()
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise DomainError(f"weights must sum to 1, got {total:.12g}")
    if not 0.0 <= tau <= 1.0:
        raise DomainError(f"tau must lie in [0, 1], got {tau}")
    order = np.argsort(v, kind="stable")
    cum = np.cumsum(w[order])
    k = int(np.searchsorted(cum, tau - 1e-12, side="left"))
    return float(v[order][min(k, len(v) - 1)])


def _grow_forest_tree(X: np.ndarray, Y: np.ndarray, config: ForestConfig, mtry: int,
                      seed: np.random.SeedSequence) -> ForestTree:
    rng = np.random.default_rng(seed)
    n = len(Y)
    size = int(np.floor(config.fraction * n))
    sample = rng.permutation(n)[:size]
    n_split = math.ceil(size / 2) if config.honesty else size
    split_idx = sample[:n_split]
    tree, _ = grow_tree(X[split_idx], Y[split_idx], None, config.min_node,
                        multiclass_gain_fn(config.class_orders), rng, mtry)
    return ForestTree(tree=tree, sample=sample, n_split=n_split, honest=config.honesty)


class QuantileForest:
    """
    Fitted forest with the training data it localises

    Per-tree weights for a point x are uniform over the weighting-half
    members in x's leaf; the forest averages them over the trees whose
    leaf holds at least one such member, so weights sum to 1 (or are all
    zero when no tree contributes).
    """

    def __init__(self, trees: List[ForestTree], X, Y, config: ForestConfig):
        self.trees = trees
        self.X = np.asarray(X, dtype=float)
        self.Y = np.asarray(Y, dtype=float)
        self.config = config
        self._y_order = np.argsort(self.Y, kind="stable")
        self._index = [self._index_tree(t) for t in trees]

    @property
    def n_samples(self) -> int:
        return len(self.Y)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def _index_tree(self, forest_tree: ForestTree):
        """Members of each leaf, grouped so leaf k owns members[start[k]:start[k] + count[k]]"""
        members = forest_tree.weight_idx
        leaves = forest_tree.tree.apply(self.X[members])
        order = np.argsort(leaves, kind="stable")
        count = np.bincount(leaves, minlength=forest_tree.tree.n_nodes)
        start = np.concatenate([[0], np.cumsum(count)[:-1]])
        in_sample = np.zeros(self.n_samples, dtype=bool)
        in_sample[forest_tree.sample] = True
        return members[order], count, start, in_sample

    def _as_matrix(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise DomainError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def _weight_block(self, X: np.ndarray, oob_rows: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        """
        Dense weights for a block of query points

        With oob_rows (training indices of the queries), trees whose
        subsample contains the query row are skipped.

        Returns:
            (weights of shape (m, n), number of contributing trees per row)
        """
        m, n = len(X), self.n_samples
        rows_all, cols_all, vals_all = [], [], []
        contributing = np.zeros(m)
        for forest_tree, (members, count, start, in_sample) in zip(self.trees, self._index):
            leaves = forest_tree.tree.apply(X)
            c = count[leaves]
            keep = c > 0
            if oob_rows is not None:
                keep &= ~in_sample[oob_rows]
            if not keep.any():
                continue
            q = np.flatnonzero(keep)
            c = c[keep]
            total = int(c.sum())
            offsets = np.cumsum(c) - c
            pos = np.arange(total) - np.repeat(offsets, c) + np.repeat(start[leaves[q]], c)
            rows_all.append(np.repeat(q, c))
            cols_all.append(members[pos])
            vals_all.append(np.repeat(1.0 / c, c))
            contributing[q] += 1
        if not rows_all:
            return np.zeros((m, n)), contributing
        W = sparse.coo_matrix((np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
                              shape=(m, n)).toarray()
        has = contributing > 0
        W[has] /= contributing[has, None]
        return W, contributing

    def _blocks(self, X: np.ndarray, oob_rows: Optional[np.ndarray] = None):
        for lo in range(0, len(X), WEIGHT_BLOCK_ROWS):
            hi = min(lo + WEIGHT_BLOCK_ROWS, len(X))
            rows = None if oob_rows is None else oob_rows[lo:hi]
            W, contributing = self._weight_block(X[lo:hi], rows)
            yield lo, hi, W, contributing

    def forest_weights(self, X) -> np.ndarray:
        """Localising weights over the training rows: vector for one point, matrix for many"""
        single = np.ndim(X) == 1
        X = self._as_matrix(X)
        W = np.vstack([block for _, _, block, _ in self._blocks(X)]) if len(X) else np.zeros((0, self.n_samples))
        return W[0] if single else W

    def oob_weights(self, i: int) -> np.ndarray:
        """Weights of training row i from the trees whose subsample excludes it"""
        self._check_oob(np.array([i]))
        W, _ = self._weight_block(self.X[[i]], np.array([i]))
        return W[0]

    def _quantiles(self, W: np.ndarray, contributing: np.ndarray, taus: np.ndarray) -> np.ndarray:
        """Weighted quantiles for every row of W and every tau, shape (m, len(taus))"""
        y_sorted = self.Y[self._y_order]
        cum = np.cumsum(W[:, self._y_order], axis=1)
        out = np.empty((len(W), len(taus)))
        for k, tau in enumerate(taus):
            idx = np.argmax(cum >= tau - 1e-12, axis=1)
            # rows whose cumulative weight never reaches tau (rounding at tau = 1)
            idx = np.where(cum[:, -1] >= tau - 1e-12, idx, len(y_sorted) - 1)
            out[:, k] = y_sorted[idx]
        empty = contributing == 0
        if empty.any():
            logger.warning(f"{int(empty.sum())} point(s) received no forest weight; "
                           f"using the marginal quantile of the training responses")
            uniform = np.full(self.n_samples, 1.0 / self.n_samples)
            for k, tau in enumerate(taus):
                out[empty, k] = weighted_quantile(self.Y, uniform / uniform.sum(), float(tau))
        return out

    def predict_quantile(self, X, tau):
        """
        Conditional quantile(s) from full-forest weights

        Args:
            X: One covariate vector or a matrix of them
            tau: A level or a sequence of levels in [0, 1]

        Returns:
            float for a single point and level; otherwise an array of shape
            (m,), (n_taus,) or (m, n_taus) following the inputs
        """
        single_x = np.ndim(X) == 1
        single_tau = np.ndim(tau) == 0
        taus = np.atleast_1d(np.asarray(tau, dtype=float))
        if np.any((taus < 0) | (taus > 1)):
            raise DomainError("quantile levels must lie in [0, 1]")
        X = self._as_matrix(X)
        out = np.empty((len(X), len(taus)))
        for lo, hi, W, contributing in self._blocks(X):
            out[lo:hi] = self._quantiles(W, contributing, taus)
        return _shape_output(out, single_x, single_tau)

    def _check_oob(self, rows: np.ndarray):
        covered = np.zeros(len(rows), dtype=bool)
        for _, _, _, in_sample in self._index:
            covered |= ~in_sample[rows]
            if covered.all():
                return
        missing = rows[~covered]
        raise PreconditionError(
            f"no tree leaves out training row {int(missing[0])} "
            f"({len(missing)} row(s) without an out-of-bag subforest)"
        )

    def oob_quantile(self, i: int, tau: float) -> float:
        """Out-of-bag conditional quantile at training row i"""
        return float(self.oob_quantiles(tau, rows=np.array([i]))[0])

    def oob_quantiles(self, tau: float, rows: Optional[np.ndarray] = None) -> np.ndarray:
        """Out-of-bag conditional quantiles at the given training rows (default: all)"""
        if not 0.0 <= tau <= 1.0:
            raise DomainError(f"tau must lie in [0, 1], got {tau}")
        rows = np.arange(self.n_samples) if rows is None else np.asarray(rows, dtype=np.int64)
        if np.any((rows < 0) | (rows >= self.n_samples)):
            raise DomainError("training row index out of range")
        self._check_oob(rows)
        out = np.empty(len(rows))
        for lo, hi, W, contributing in self._blocks(self.X[rows], rows):
            out[lo:hi] = self._quantiles(W, contributing, np.array([tau]))[:, 0]
        return out

    def to_payload(self) -> Tuple[Dict, Dict[str, np.ndarray]]:
        header = {"config": self.config.to_dict()}
        sizes = np.array([len(t.sample) for t in self.trees], dtype=np.int64)
        arrays = {"forest_X": self.X, "forest_Y": self.Y,
                  "forest_sample": np.concatenate([t.sample for t in self.trees]).astype(np.int64),
                  "forest_sample_offsets": np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64),
                  "forest_n_split": np.array([t.n_split for t in self.trees], dtype=np.int64)}
        arrays.update(pack_trees([t.tree for t in self.trees], "forest_tree_"))
        return header, arrays

    @classmethod
    def from_payload(cls, header: Dict, arrays: Dict[str, np.ndarray]) -> "QuantileForest":
        config = ForestConfig.from_dict(header["config"])
        offsets = arrays["forest_sample_offsets"]
        samples = arrays["forest_sample"]
        trees = [ForestTree(tree=tree, sample=samples[offsets[k]:offsets[k + 1]],
                            n_split=int(arrays["forest_n_split"][k]), honest=config.honesty)
                 for k, tree in enumerate(unpack_trees(arrays, "forest_tree_"))]
        return cls(trees, arrays["forest_X"], arrays["forest_Y"], config)


def _shape_output(out: np.ndarray, single_x: bool, single_tau: bool):
    if single_x and single_tau:
        return float(out[0, 0])
    if single_x:
        return out[0]
    if single_tau:
        return out[:, 0]
    return out


def fit_forest(X, Y, config: Optional[ForestConfig] = None, n_jobs: int = 1) -> QuantileForest:
    """
    Fit an honest quantile forest

    Each tree draws floor(fraction * n) rows without replacement from its
    own seed stream; with honesty the first ceil(size / 2) grow the
    structure and the rest carry the weights.

    Args:
        X: Covariates, shape (n, d)
        Y: Responses, shape (n,)
        config: Forest hyper-parameters (defaults if None)
        n_jobs: joblib workers; results do not depend on it

    Returns:
        QuantileForest
    """
    config = config or ForestConfig()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).ravel()
    n = len(Y)
    if len(X) != n:
        raise DomainError(f"X has {len(X)} rows but Y has {n} entries")
    if n < 4 * config.min_node:
        raise PreconditionError(f"forest needs at least {4 * config.min_node} rows, got {n}")
    size = int(np.floor(config.fraction * n))
    n_split = math.ceil(size / 2) if config.honesty else size
    if n_split < config.min_node or (config.honesty and size - n_split < 1):
        raise PreconditionError(f"subsample of {size} rows is too small for one tree")

    mtry = config.resolve_mtry(X.shape[1])
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_trees)
    grown = Parallel(n_jobs=n_jobs, return_as="generator")(
        delayed(_grow_forest_tree)(X, Y, config, mtry, s) for s in seeds
    )
    trees = []
    for tree in grown:
        trees.append(tree)
        if len(trees) % PROGRESS_EVERY == 0:
            logger.debug(f"Grown {len(trees)}/{config.n_trees} forest trees")
    forest = QuantileForest(trees, X, Y, config)
    mean_leaves = np.mean([t.tree.n_leaves for t in trees])
    logger.info(f"[OK] Quantile forest: {config.n_trees} trees on {n} rows "
                f"(subsample {size}, mtry {mtry}, mean leaves {mean_leaves:.1f})")
    return forest
