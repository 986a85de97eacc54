"""Shared fixtures: small simulated data sets and fitted models"""

import numpy as np
import pytest

from core.boosting import BoostParams
from core.pipeline import fit_extreme_model
from core.quantile_forest import ForestConfig
from core.simulation import gen_model1


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_model1():
    """Model 1 draw with few covariates"""
    return gen_model1(600, seed=7, d=4)


@pytest.fixture(scope="session")
def small_forest_config():
    return ForestConfig(n_trees=40, seed=3)


@pytest.fixture(scope="session")
def small_boost_params():
    return BoostParams(n_trees=30, depth_sigma=1, depth_gamma=1, lambda_scale=0.05, seed=11)


@pytest.fixture(scope="session")
def fitted_model(small_model1, small_forest_config, small_boost_params):
    return fit_extreme_model(small_model1.X, small_model1.Y, tau0=0.8,
                             forest_config=small_forest_config, boost_params=small_boost_params,
                             target_name="y")
