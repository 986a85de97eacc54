"""
Configuration Module
Flat JSON settings with environment and command-line overrides
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

from dotenv import load_dotenv

from core.boosting import BoostParams
from core.diagnostics import CvOptions
from core.errors import ConfigError, TailgroveError
from core.quantile_forest import ForestConfig

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_FILE = "config.json"

DEFAULTS: Dict[str, Any] = {
    "tau0": 0.8,
    "n_trees": 200,
    "depth_sigma": 2,
    "depth_gamma": 1,
    "lambda_scale": 0.01,
    "lambda_ratio": 7.0,
    "subsample": 0.75,
    "min_leaf_sigma": None,
    "min_leaf_gamma": None,
    "forest_trees": 500,
    "forest_fraction": 0.5,
    "forest_mtry": None,
    "forest_min_node": 5,
    "forest_class_orders": [0.1, 0.5, 0.9],
    "honesty": True,
    "cv_folds": 5,
    "cv_repeats": 5,
    "cv_max_trees": 500,
    "seed": 0,
    "threads": -1,
    "log_level": "INFO",
    "log_file": "tailgrove.log",
}

_INT_KEYS = {"n_trees", "depth_sigma", "depth_gamma", "forest_trees", "forest_min_node",
             "cv_folds", "cv_repeats", "cv_max_trees", "seed", "threads"}
_OPTIONAL_INT_KEYS = {"min_leaf_sigma", "min_leaf_gamma", "forest_mtry"}
_FLOAT_KEYS = {"tau0", "lambda_scale", "lambda_ratio", "subsample", "forest_fraction"}

ENV_OVERRIDES = {"TAILGROVE_THREADS": "threads", "TAILGROVE_LOG_LEVEL": "log_level"}


def _coerce(key: str, value: Any) -> Any:
    """Check and normalise one configuration value"""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown configuration key: {key}")
    is_int = isinstance(value, int) and not isinstance(value, bool)
    if key in _INT_KEYS or (key in _OPTIONAL_INT_KEYS and value is not None):
        if not is_int:
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if key in _OPTIONAL_INT_KEYS:
        return None
    if key in _FLOAT_KEYS:
        if not (is_int or isinstance(value, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if key == "honesty":
        if not isinstance(value, bool):
            raise ConfigError(f"honesty must be true or false, got {value!r}")
        return value
    if key == "forest_class_orders":
        if not isinstance(value, list) or not value or \
                not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"forest_class_orders must be a list of numbers, got {value!r}")
        return [float(v) for v in value]
    if key == "log_level":
        level = str(value).upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ConfigError(f"unknown log level: {value!r}")
        return level
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")
    return value


def _from_env() -> Dict[str, Any]:
    values = {}
    for var, key in ENV_OVERRIDES.items():
        raw = os.environ.get(var)
        if raw is None or raw.strip() == "":
            continue
        if key == "threads":
            try:
                values[key] = int(raw)
            except ValueError:
                raise ConfigError(f"{var} must be an integer, got {raw!r}") from None
        else:
            values[key] = raw.strip()
    return values


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None,
                use_env: bool = True) -> Dict[str, Any]:
    """
    Resolve settings: defaults < config file < environment < overrides

    Args:
        path: JSON config file; when None, config.json in the working
            directory is used if it exists
        overrides: Values from the command line (None entries are ignored)
        use_env: Read TAILGROVE_* variables (and a .env file)

    Returns:
        Dict with every key of DEFAULTS
    """
    config = dict(DEFAULTS)

    explicit = path is not None
    path = Path(path) if explicit else Path(DEFAULT_CONFIG_FILE)
    if path.exists():
        try:
            with open(path, "r", encoding="utf-8") as f:
                document = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(document, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        for key, value in document.items():
            config[key] = _coerce(key, value)
        logger.debug(f"Configuration read from {path}")
    elif explicit:
        raise FileNotFoundError(f"config file not found: {path}")

    if use_env:
        load_dotenv()
        for key, value in _from_env().items():
            config[key] = _coerce(key, value)

    for key, value in (overrides or {}).items():
        if value is not None:
            config[key] = _coerce(key, value)
    return config


def boost_params_from_config(config: Dict[str, Any]) -> BoostParams:
    try:
        return BoostParams(n_trees=config["n_trees"], depth_sigma=config["depth_sigma"],
                           depth_gamma=config["depth_gamma"], lambda_scale=config["lambda_scale"],
                           lambda_ratio=config["lambda_ratio"], subsample=config["subsample"],
                           min_leaf_sigma=config["min_leaf_sigma"], min_leaf_gamma=config["min_leaf_gamma"],
                           seed=config["seed"])
    except TailgroveError as e:
        raise ConfigError(f"invalid boosting settings: {e}") from None


def forest_config_from_config(config: Dict[str, Any]) -> ForestConfig:
    try:
        return ForestConfig(n_trees=config["forest_trees"], fraction=config["forest_fraction"],
                            mtry=config["forest_mtry"], min_node=config["forest_min_node"],
                            class_orders=tuple(config["forest_class_orders"]), honesty=config["honesty"],
                            seed=config["seed"])
    except TailgroveError as e:
        raise ConfigError(f"invalid forest settings: {e}") from None


def cv_options_from_config(config: Dict[str, Any], depth_grid=None) -> CvOptions:
    try:
        return CvOptions(folds=config["cv_folds"], repeats=config["cv_repeats"],
                         max_trees=config["cv_max_trees"], depth_grid=depth_grid, seed=config["seed"])
    except TailgroveError as e:
        raise ConfigError(f"invalid cross-validation settings: {e}") from None
