"""
Extreme Quantile Pipeline
Forest threshold at an intermediate level, out-of-bag exceedances, boosted
GPD tail on the positive exceedances, and extrapolation to extreme levels
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from core.boosting import BoostParams, GpdBoostModel, fit_gpd_boost
from core.diagnostics import CvOptions, select_trees
from core.errors import DomainError
from core.gpd import extreme_quantile
from core.quantile_forest import ForestConfig, QuantileForest, fit_forest

logger = logging.getLogger(__name__)

DEFAULT_TAU0 = 0.8


@dataclass
class ExtremeQuantileModel:
    """Intermediate-quantile forest plus boosted GPD tail"""

    forest: QuantileForest
    boost: GpdBoostModel
    tau0: float = DEFAULT_TAU0
    feature_names: List[str] = field(default_factory=list)
    selection: Dict = field(default_factory=dict)
    target_name: Optional[str] = None

    def __post_init__(self):
        if not 0.0 < self.tau0 < 1.0:
            raise DomainError(f"tau0 must lie strictly between 0 and 1, got {self.tau0}")

    @property
    def n_features(self) -> int:
        return self.forest.n_features


def compute_exceedances(forest: QuantileForest, X, Y, tau0: float) -> np.ndarray:
    """Exceedances of each training response over its out-of-bag tau0-quantile"""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(Y, dtype=float).ravel()
    if X.shape != forest.X.shape or len(y) != forest.n_samples:
        raise DomainError("exceedances are defined on the forest's own training data")
    threshold = forest.oob_quantiles(tau0)
    z = np.maximum(y - threshold, 0.0)
    logger.info(f"Exceedances over the out-of-bag {tau0:g}-quantile: {int(np.sum(z > 0))} of {len(z)} positive")
    return z


def fit_extreme_model(X, Y, tau0: float = DEFAULT_TAU0, forest_config: Optional[ForestConfig] = None,
                      boost_params: Optional[BoostParams] = None, select: Optional[CvOptions] = None,
                      feature_names: Optional[Sequence[str]] = None, target_name: Optional[str] = None,
                      n_jobs: int = 1) -> ExtremeQuantileModel:
    """
    Fit the full two-stage model

    Args:
        X: Covariates, shape (n, d)
        Y: Responses, shape (n,)
        tau0: Intermediate level used as the threshold
        forest_config: Forest hyper-parameters
        boost_params: Boosting hyper-parameters
        select: When given, the number of trees (and depths if a grid is
            set) is chosen by cross-validation before the final fit
        feature_names: Column names stored with the model
        target_name: Response column name stored with the model
        n_jobs: joblib workers for the forest and cross-validation

    Returns:
        ExtremeQuantileModel
    """
    if not 0.0 < tau0 < 1.0:
        raise DomainError(f"tau0 must lie strictly between 0 and 1, got {tau0}")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(Y, dtype=float).ravel()
    params = boost_params or BoostParams()

    forest = fit_forest(X, y, forest_config, n_jobs=n_jobs)
    z = compute_exceedances(forest, X, y, tau0)
    positive = z > 0

    selection: Dict = {}
    if select is not None:
        chosen = select_trees(X[positive], z[positive], params, select, n_jobs=n_jobs)
        params = params.with_updates(n_trees=chosen.n_trees, depth_sigma=chosen.depths[0],
                                     depth_gamma=chosen.depths[1])
        selection = {"n_trees": chosen.n_trees, "depths": list(chosen.depths)}

    boost = fit_gpd_boost(X[positive], z[positive], params)
    names = list(feature_names) if feature_names is not None else [f"x{j + 1}" for j in range(X.shape[1])]
    return ExtremeQuantileModel(forest=forest, boost=boost, tau0=tau0, feature_names=names,
                                selection=selection, target_name=target_name)


def predict_extreme_quantile(model: ExtremeQuantileModel, X, tau):
    """
    Conditional quantile(s) at levels tau >= tau0

    Full-forest weights give the threshold at new points; tau = tau0
    returns that threshold unchanged.

    Returns:
        float for one point and one level; otherwise an array shaped
        (m,), (n_taus,) or (m, n_taus)
    """
    single_x = np.ndim(X) == 1
    single_tau = np.ndim(tau) == 0
    taus = np.atleast_1d(np.asarray(tau, dtype=float))
    if np.any(taus < model.tau0):
        raise DomainError("tau below tau0")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    q0 = model.forest.predict_quantile(X, model.tau0)
    sigma, gamma = model.boost.predict_params(X)
    out = np.column_stack([extreme_quantile(q0, sigma, gamma, model.tau0, t) for t in taus])
    if single_x and single_tau:
        return float(out[0, 0])
    if single_x:
        return out[0]
    if single_tau:
        return out[:, 0]
    return out


def quantile_column(tau: float) -> str:
    return f"q_{tau:.10g}"


def prediction_table(model: ExtremeQuantileModel, X, taus: Sequence[float]) -> pd.DataFrame:
    """Intermediate quantile, GPD parameters and one quantile column per level"""
    taus = [float(t) for t in taus]
    if any(t < model.tau0 for t in taus):
        raise DomainError("tau below tau0")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    q0 = model.forest.predict_quantile(X, model.tau0)
    sigma, gamma = model.boost.predict_params(X)
    table = pd.DataFrame({"q_tau0": q0, "sigma": sigma, "gamma": gamma})
    for t in taus:
        table[quantile_column(t)] = extreme_quantile(q0, sigma, gamma, model.tau0, t)
    return table
