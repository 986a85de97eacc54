"""
Diagnostics Module
Cross-validated choice of the number of trees and depths, permutation and
split-based variable importance, partial dependence and exponential QQ
residuals
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from core.boosting import MIN_POSITIVE_EXCEEDANCES, BoostParams, GpdBoostModel, fit_gpd_boost
from core.errors import DomainError, PreconditionError
from core.gpd import GpdParams, deviance, extreme_quantile, gpd_cumulative_hazard

logger = logging.getLogger(__name__)

DEFAULT_DEPTH_GRID = [(1, 0), (1, 1), (2, 1), (2, 2)]


@dataclass(frozen=True)
class CvOptions:
    """Settings for cross-validated selection of the number of trees (and depths)"""

    folds: int = 5
    repeats: int = 5
    max_trees: int = 500
    depth_grid: Optional[Tuple[Tuple[int, int], ...]] = None
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise DomainError(f"need at least 2 folds, got {self.folds}")
        if self.repeats < 1:
            raise DomainError(f"need at least 1 repeat, got {self.repeats}")
        if self.max_trees < 0:
            raise DomainError(f"max_trees must be >= 0, got {self.max_trees}")
        if self.depth_grid is not None:
            grid = tuple((int(a), int(b)) for a, b in self.depth_grid)
            if not grid:
                raise DomainError("depth grid is empty")
            object.__setattr__(self, "depth_grid", grid)


@dataclass
class CvCurve:
    """Cross-validation deviance for 0..max_trees iterations at one depth pair"""

    depths: Tuple[int, int]
    params: BoostParams
    dev: np.ndarray

    @property
    def selected_trees(self) -> int:
        # np.argmin returns the first minimiser
        return int(np.argmin(self.dev))

    @property
    def best_deviance(self) -> float:
        return float(self.dev[self.selected_trees])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"n_trees": np.arange(len(self.dev)), "depth_sigma": self.depths[0],
                             "depth_gamma": self.depths[1], "cv_deviance": self.dev})


@dataclass
class DepthSelection:
    """Global minimiser of the cross-validation deviance over a depth grid"""

    depths: Tuple[int, int]
    n_trees: int
    curves: List[CvCurve] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.concat([c.to_frame() for c in self.curves], ignore_index=True)


def _fold_deviance(X_train, Z_train, X_test, Z_test, params: BoostParams) -> np.ndarray:
    model = fit_gpd_boost(X_train, Z_train, params)
    return model.staged_deviance(X_test, Z_test)


def cv_deviance(X, Z, params: BoostParams, folds: int = 5, repeats: int = 5, seed: int = 0,
                n_jobs: int = 1, fold_seeds: Optional[Sequence[int]] = None) -> CvCurve:
    """
    Repeated K-fold cross-validation deviance

    The positive exceedances are split into folds anew for each repeat;
    params.n_trees is the largest number of trees evaluated. Held-out
    deviances are summed over folds and repeats.

    Args:
        X: Covariates, shape (n, d)
        Z: Exceedances, shape (n,)
        params: Boosting hyper-parameters; n_trees acts as the maximum
        folds: Number of folds K
        repeats: Number of repetitions
        seed: Root seed for the fold partitions
        n_jobs: joblib workers
        fold_seeds: Explicit partition seed per repeat (overrides seed)

    Returns:
        CvCurve
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    z = np.asarray(Z, dtype=float).ravel()
    pos = np.flatnonzero(z > 0)
    n_pos = len(pos)
    if folds < 2 or folds > n_pos:
        raise PreconditionError(f"cannot split {n_pos} positive exceedances into {folds} folds")
    if fold_seeds is not None and len(fold_seeds) != repeats:
        raise DomainError(f"expected {repeats} fold seeds, got {len(fold_seeds)}")
    smallest_train = n_pos - int(np.ceil(n_pos / folds))
    if smallest_train < MIN_POSITIVE_EXCEEDANCES:
        raise PreconditionError(
            f"fold training sets keep only {smallest_train} positive exceedances "
            f"(need {MIN_POSITIVE_EXCEEDANCES})"
        )

    tasks = []
    for r in range(repeats):
        rng = np.random.default_rng(fold_seeds[r] if fold_seeds is not None else [seed, r])
        parts = np.array_split(rng.permutation(pos), folds)
        for k, test in enumerate(parts):
            train = np.concatenate([p for j, p in enumerate(parts) if j != k])
            tasks.append((train, test))

    fold_curves = Parallel(n_jobs=n_jobs, return_as="generator")(
        delayed(_fold_deviance)(X[train], z[train], X[test], z[test], params) for train, test in tasks
    )
    results = []
    for k, fold_dev in enumerate(fold_curves):
        results.append(fold_dev)
        logger.debug(f"Fold {k % folds + 1}/{folds} of repeat {k // folds + 1}: "
                     f"held-out deviance {fold_dev[0]:.6g} -> {fold_dev[-1]:.6g}")
    dev = np.sum(results, axis=0)
    curve = CvCurve(depths=(params.depth_sigma, params.depth_gamma), params=params, dev=dev)
    logger.info(f"Cross-validation at depths {curve.depths}: {len(tasks)} fits, "
                f"selected {curve.selected_trees} trees (deviance {curve.best_deviance:.6g})")
    return curve


def select_depths(X, Z, depth_grid: Sequence[Tuple[int, int]], params: BoostParams, folds: int = 5,
                  repeats: int = 5, seed: int = 0, n_jobs: int = 1) -> DepthSelection:
    """
    Cross-validate each depth pair and return the global minimiser

    Ties are resolved in grid order, then towards fewer trees.
    """
    if not depth_grid:
        raise DomainError("depth grid is empty")
    curves = []
    for depth_sigma, depth_gamma in depth_grid:
        grid_params = params.with_updates(depth_sigma=int(depth_sigma), depth_gamma=int(depth_gamma))
        curves.append(cv_deviance(X, Z, grid_params, folds, repeats, seed, n_jobs))
    best = min(range(len(curves)), key=lambda k: curves[k].best_deviance)
    chosen = curves[best]
    logger.info(f"[OK] Selected depths {chosen.depths} with {chosen.selected_trees} trees")
    return DepthSelection(depths=chosen.depths, n_trees=chosen.selected_trees, curves=curves)


def select_trees(X, Z, params: BoostParams, options: CvOptions, n_jobs: int = 1) -> DepthSelection:
    """Number of trees (and depths when options carry a grid) chosen by cross-validation"""
    cv_params = params.with_updates(n_trees=options.max_trees)
    grid = options.depth_grid or ((params.depth_sigma, params.depth_gamma),)
    return select_depths(X, Z, grid, cv_params, options.folds, options.repeats, options.seed, n_jobs)


def _normalise(scores: np.ndarray) -> np.ndarray:
    top = np.max(scores) if scores.size else 0.0
    return scores / top * 100.0 if top > 0 else scores


def permutation_importance(model: GpdBoostModel, X, Z, seed: int = 0, normalise: bool = True) -> np.ndarray:
    """
    Increase in deviance when one covariate column is shuffled

    One permutation per feature, all drawn in feature order from a single
    stream seeded by ``seed``. Scores are rescaled so the largest is 100
    when any score is positive.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    z = np.asarray(Z, dtype=float).ravel()
    pos = z > 0
    Xp, zp = X[pos], z[pos]

    def total_deviance(data: np.ndarray) -> float:
        sigma, gamma = model.predict_params(data)
        return float(np.sum(deviance(zp, sigma, gamma)))

    baseline = total_deviance(Xp)
    rng = np.random.default_rng(seed)
    scores = np.zeros(X.shape[1])
    for j in range(X.shape[1]):
        shuffled = Xp.copy()
        shuffled[:, j] = Xp[rng.permutation(len(Xp)), j]
        scores[j] = total_deviance(shuffled) - baseline
    return _normalise(scores) if normalise else scores


def relative_importance(model: GpdBoostModel, normalise: bool = True) -> Dict[str, np.ndarray]:
    """Summed split gains per feature, separately over the scale and shape trees"""
    report = {}
    for name, trees in (("sigma", model.trees_sigma), ("gamma", model.trees_gamma)):
        totals = np.zeros(model.n_features)
        for tree in trees:
            features, gains = tree.split_gains()
            np.add.at(totals, features, gains)
        report[name] = _normalise(totals) if normalise else totals
    return report


@dataclass
class ImportanceReport:
    """Permutation and relative importance per feature"""

    feature_names: List[str]
    permutation: np.ndarray
    relative_sigma: np.ndarray
    relative_gamma: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "feature_index": np.arange(1, len(self.feature_names) + 1),
            "permutation": self.permutation,
            "relative_sigma": self.relative_sigma,
            "relative_gamma": self.relative_gamma,
        })

    def top_feature(self) -> str:
        return self.feature_names[int(np.argmax(self.permutation))]


def model_exceedances(model, X, Y) -> np.ndarray:
    """
    Exceedances of Y over the model's tau0-quantile

    The forest's own training rows use out-of-bag quantiles; other rows use
    the full forest.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(Y, dtype=float).ravel()
    forest = model.forest
    if X.shape == forest.X.shape and np.array_equal(X, forest.X):
        threshold = forest.oob_quantiles(model.tau0)
    else:
        threshold = forest.predict_quantile(X, model.tau0)
    return np.maximum(y - threshold, 0.0)


def importance_report(model, X, Y, seed: int = 0) -> ImportanceReport:
    """
    Importance tables for a fitted extreme quantile model

    Exceedances from model_exceedances play the role of Z for the
    permutation scores.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    z = model_exceedances(model, X, Y)
    relative = relative_importance(model.boost)
    names = list(model.feature_names) or [f"x{j + 1}" for j in range(X.shape[1])]
    report = ImportanceReport(feature_names=names,
                              permutation=permutation_importance(model.boost, X, z, seed),
                              relative_sigma=relative["sigma"], relative_gamma=relative["gamma"])
    logger.info(f"Most important feature by permutation: {report.top_feature()}")
    return report


def default_grid(X, feature: int, n_points: int = 50) -> np.ndarray:
    """Evenly spaced values spanning the observed range of one feature"""
    column = np.asarray(X, dtype=float)[:, feature]
    return np.linspace(column.min(), column.max(), n_points)


def partial_dependence(model, features: Sequence[int], grid, output: str = "sigma",
                       tau: Optional[float] = None, X=None) -> np.ndarray:
    """
    Average prediction with one or two covariates held at grid values

    Args:
        model: ExtremeQuantileModel or GpdBoostModel
        features: One or two feature indices (0-based)
        grid: Values for one feature, or a pair of value arrays for two
        output: "sigma", "gamma" or "quantile"
        tau: Level for output="quantile"
        X: Rows to average over (default: the forest training rows)

    Returns:
        Curve of shape (len(grid),) or surface of shape (len(grid[0]), len(grid[1]))
    """
    boost = model if isinstance(model, GpdBoostModel) else model.boost
    if output not in ("sigma", "gamma", "quantile"):
        raise DomainError(f"unknown partial dependence output: {output}")
    if output == "quantile":
        if isinstance(model, GpdBoostModel):
            raise DomainError("quantile partial dependence needs the full extreme quantile model")
        if tau is None:
            raise DomainError("quantile partial dependence needs tau")
    if X is None:
        if isinstance(model, GpdBoostModel):
            raise DomainError("rows to average over are required for a bare boosting model")
        X = model.forest.X
    X = np.atleast_2d(np.asarray(X, dtype=float))

    features = list(features)
    if len(features) == 1:
        grids = [np.asarray(grid, dtype=float).ravel()]
    elif len(features) == 2:
        grids = [np.asarray(g, dtype=float).ravel() for g in grid]
    else:
        raise DomainError("partial dependence takes one or two features")
    for g in grids:
        if g.size == 0 or not np.all(np.isfinite(g)):
            raise DomainError("partial dependence grid must be finite and nonempty")

    def average(values: Sequence[float]) -> float:
        data = X.copy()
        for j, v in zip(features, values):
            data[:, j] = v
        if output == "quantile":
            q0 = model.forest.predict_quantile(data, model.tau0)
            sigma, gamma = boost.predict_params(data)
            return float(np.mean(extreme_quantile(q0, sigma, gamma, model.tau0, tau)))
        sigma, gamma = boost.predict_params(data)
        return float(np.mean(sigma if output == "sigma" else gamma))

    if len(features) == 1:
        return np.array([average([v]) for v in grids[0]])
    return np.array([[average([a, b]) for b in grids[1]] for a in grids[0]])


def qq_residuals(model, X, Z) -> pd.DataFrame:
    """
    Exponential QQ residuals of a fitted GPD model

    Each positive exceedance is mapped to -log(1 - H(z)) under its fitted
    parameters; under a correct fit these are standard exponential. The
    sorted residuals are paired with exponential plotting positions
    -log(1 - i / (m + 1)).

    Args:
        model: GpdBoostModel, ExtremeQuantileModel, or GpdParams for a constant fit
        X: Covariates, shape (n, d)
        Z: Exceedances, shape (n,); zeros are skipped

    Returns:
        DataFrame with columns theoretical and residual, one row per positive exceedance
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    z = np.asarray(Z, dtype=float).ravel()
    if len(z) != len(X):
        raise DomainError(f"{len(X)} covariate rows but {len(z)} exceedances")
    pos = z > 0
    m = int(np.sum(pos))
    if m == 0:
        raise PreconditionError("no positive exceedances for the QQ diagnostic")

    if isinstance(model, GpdParams):
        sigma, gamma = model.sigma, model.gamma
    else:
        boost = model if isinstance(model, GpdBoostModel) else model.boost
        sigma, gamma = boost.predict_params(X[pos])
    residual = np.sort(gpd_cumulative_hazard(z[pos], sigma, gamma))
    theoretical = -np.log1p(-np.arange(1, m + 1) / (m + 1.0))
    return pd.DataFrame({"theoretical": theoretical, "residual": residual})


def qq_report(model, X, Y) -> pd.DataFrame:
    """
    QQ residuals of the boosted fit next to the constant fit theta0

    Exceedances come from model_exceedances.
    """
    z = model_exceedances(model, X, Y)
    boosted = qq_residuals(model.boost, X, z)
    constant = qq_residuals(model.boost.theta0, X, z)
    frame = pd.DataFrame({"theoretical": boosted["theoretical"], "boosted": boosted["residual"],
                          "constant": constant["residual"]})
    for name in ("boosted", "constant"):
        gap = np.max(np.abs(frame[name] - frame["theoretical"]))
        logger.info(f"QQ residuals ({name}): {len(frame)} exceedances, largest gap {gap:.4g}")
    return frame
