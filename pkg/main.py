"""
Tailgrove - Extreme Conditional Quantile Regression
Command-line entry point: fit, predict, cross-validate, explain and
benchmark boosted GPD tail models
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from dataclasses import replace
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from colorama import Fore, Style
from colorama import init as colorama_init

from core.config import (boost_params_from_config, cv_options_from_config, forest_config_from_config,
                         load_config)
from core.datasets import load_csv, write_csv
from core.diagnostics import default_grid, importance_report, partial_dependence, qq_report, select_depths
from core.errors import (ConfigError, ConvergenceError, DataParseError, DomainError, ModelFormatError,
                         PreconditionError)
from core.model_store import load_model, save_model
from core.pipeline import compute_exceedances, fit_extreme_model, prediction_table
from core.quantile_forest import fit_forest
from core.simulation import (DEFAULT_STUDY_CV, SimModelSpec, comparison_frames, default_study_params,
                             run_comparison)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_IO = 2
EXIT_PARSE = 3
EXIT_PRECONDITION = 4
EXIT_CONVERGENCE = 5


def setup_logging(level: str, log_file: str):
    """Configure root logging once per command"""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_file, encoding='utf-8'),
            logging.StreamHandler()
        ],
        force=True
    )


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, (DataParseError, ModelFormatError, ConfigError)):
        return EXIT_PARSE
    if isinstance(error, (PreconditionError, DomainError)):
        return EXIT_PRECONDITION
    if isinstance(error, ConvergenceError):
        return EXIT_CONVERGENCE
    if isinstance(error, OSError):
        return EXIT_IO
    return EXIT_OTHER


def report_error(error: BaseException):
    message = str(error).splitlines()[0] if str(error) else ""
    print(f"{Fore.RED}error: {type(error).__name__}: {message}{Style.RESET_ALL}", file=sys.stderr)


def read_depth_grid(path: str):
    """Depth pairs from a JSON list such as [[1, 0], [1, 1]]"""
    with open(path, "r", encoding="utf-8") as f:
        try:
            document = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(document, list) or not document or \
            not all(isinstance(p, list) and len(p) == 2 and all(isinstance(v, int) for v in p) for p in document):
        raise ConfigError(f"{path}: depth grid must be a nonempty list of [depth_sigma, depth_gamma] pairs")
    return [tuple(p) for p in document]


def parse_taus(text: str) -> List[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse levels: {text!r}") from None


# ---------------------------------------------------------------- commands

def cmd_fit(args, config) -> int:
    data = load_csv(args.data, target=args.target)
    select = None
    if args.cv or args.grid:
        grid = read_depth_grid(args.grid) if args.grid else None
        select = cv_options_from_config(config, depth_grid=grid)
    model = fit_extreme_model(data.X, data.y, tau0=config["tau0"],
                              forest_config=forest_config_from_config(config),
                              boost_params=boost_params_from_config(config), select=select,
                              feature_names=data.feature_names, target_name=data.target_name,
                              n_jobs=config["threads"])
    save_model(model, args.out)

    theta0 = model.boost.theta0
    n_pos = int(np.sum(compute_exceedances(model.forest, data.X, data.y, model.tau0) > 0))
    print(f"theta0: sigma={theta0.sigma:.6g} gamma={theta0.gamma:.6g}")
    print(f"positive exceedances: {n_pos} of {data.n}")
    print(f"trees: {model.boost.n_trees} (depths {model.boost.params.depth_sigma}/{model.boost.params.depth_gamma})")
    if model.selection:
        print(f"selected by cross-validation: {model.selection['n_trees']} trees, "
              f"depths {tuple(model.selection['depths'])}")
    return EXIT_OK


def cmd_predict(args, config) -> int:
    model = load_model(args.model)
    data = load_csv(args.data, features=model.feature_names)
    table = prediction_table(model, data.X, args.tau)
    write_csv(table, args.out)
    print(f"Wrote predictions for {data.n} rows at {len(args.tau)} level(s) to {args.out}")
    return EXIT_OK


def cmd_cv(args, config) -> int:
    data = load_csv(args.data, target=args.target)
    grid = read_depth_grid(args.grid) if args.grid else [(config["depth_sigma"], config["depth_gamma"])]
    options = cv_options_from_config(config, depth_grid=grid)
    forest = fit_forest(data.X, data.y, forest_config_from_config(config), n_jobs=config["threads"])
    z = compute_exceedances(forest, data.X, data.y, config["tau0"])
    positive = z > 0
    params = boost_params_from_config(config).with_updates(n_trees=options.max_trees)
    chosen = select_depths(data.X[positive], z[positive], grid, params, options.folds, options.repeats,
                           options.seed, n_jobs=config["threads"])
    write_csv(chosen.to_frame(), args.out)
    print(f"selected depths {chosen.depths} with {chosen.n_trees} trees")
    return EXIT_OK


def cmd_importance(args, config) -> int:
    model = load_model(args.model)
    target = args.target or model.target_name
    if target is None:
        raise ConfigError("the model does not record its response column; pass --target")
    data = load_csv(args.data, target=target, features=model.feature_names)
    report = importance_report(model, data.X, data.y, seed=config["seed"])
    write_csv(report.to_frame(), args.out)
    for name, perm, rel_s, rel_g in zip(report.feature_names, report.permutation,
                                        report.relative_sigma, report.relative_gamma):
        logger.debug(f"{name}: permutation={perm:.4g} sigma={rel_s:.4g} gamma={rel_g:.4g}")
    print(f"top feature by permutation importance: {report.top_feature()}")
    return EXIT_OK


def cmd_pdp(args, config) -> int:
    model = load_model(args.model)
    data = load_csv(args.data, features=model.feature_names)
    names = [args.feature] + ([args.feature2] if args.feature2 else [])
    for name in names:
        if name not in model.feature_names:
            raise ConfigError(f"unknown feature: {name}")
    features = [model.feature_names.index(n) for n in names]
    if args.output == "quantile" and args.tau is None:
        raise ConfigError("--output quantile needs --tau")

    if len(features) == 1:
        grid = default_grid(data.X, features[0], args.grid)
        values = partial_dependence(model, features, grid, args.output, args.tau, X=data.X)
        table = pd.DataFrame({"value1": grid, "pdp": values})
    else:
        grids = [default_grid(data.X, j, args.grid) for j in features]
        surface = partial_dependence(model, features, grids, args.output, args.tau, X=data.X)
        g1, g2 = np.meshgrid(grids[0], grids[1], indexing="ij")
        table = pd.DataFrame({"value1": g1.ravel(), "value2": g2.ravel(), "pdp": surface.ravel()})
    write_csv(table, args.out)
    print(f"Wrote partial dependence of {args.output} on {', '.join(names)} to {args.out}")
    return EXIT_OK


def cmd_qq(args, config) -> int:
    model = load_model(args.model)
    target = args.target or model.target_name
    if target is None:
        raise ConfigError("the model does not record its response column; pass --target")
    data = load_csv(args.data, target=target, features=model.feature_names)
    table = qq_report(model, data.X, data.y)
    write_csv(table, args.out)
    print(f"Wrote QQ residuals for {len(table)} exceedances to {args.out}")
    return EXIT_OK


def cmd_simulate(args, config) -> int:
    spec = SimModelSpec(model_id=args.model_id, n=args.n, seed=config["seed"], d=args.d)
    params = default_study_params(args.model_id).with_updates(seed=config["seed"])
    if args.n_trees is not None:
        params = params.with_updates(n_trees=args.n_trees)
    # a fixed --n-trees turns off the per-replication cross-validation
    cv = None if args.no_cv or args.n_trees is not None else replace(DEFAULT_STUDY_CV, seed=config["seed"])
    results = run_comparison(spec, parse_taus(args.taus), args.R, tau0=config["tau0"], boost_params=params,
                             forest_config=forest_config_from_config(config), cv=cv, n_points=args.points,
                             n_jobs=config["threads"])
    per_rep, summary = comparison_frames(results)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(per_rep, out / "ise.csv")
    write_csv(summary, out / "mise.csv")
    for res in results:
        print(f"{res.method:>14}  tau={res.tau:<8g} MISE={res.mise:.6g}  failures={res.failures}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="root random seed")
    common.add_argument("--threads", type=int, help="worker processes (-1 = all cores)")
    common.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING or ERROR")

    parser = argparse.ArgumentParser(prog="tailgrove", description="Extreme conditional quantile regression")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit a model and save it")
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--tau0", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--n-trees", dest="n_trees", type=int)
    p.add_argument("--depth-sigma", dest="depth_sigma", type=int)
    p.add_argument("--depth-gamma", dest="depth_gamma", type=int)
    p.add_argument("--cv", action="store_true", help="choose the number of trees by cross-validation")
    p.add_argument("--grid", help="JSON depth grid for cross-validation")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("predict", parents=[common], help="predict extreme quantiles")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tau", type=float, action="append", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("cv", parents=[common], help="cross-validation curves over a depth grid")
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--tau0", type=float)
    p.add_argument("--grid", help="JSON depth grid")
    p.add_argument("--Bmax", dest="cv_max_trees", type=int)
    p.add_argument("--K", dest="cv_folds", type=int)
    p.add_argument("--repeats", dest="cv_repeats", type=int)
    p.add_argument("--out", default="cv_curve.csv")
    p.set_defaults(handler=cmd_cv)

    p = sub.add_parser("importance", parents=[common], help="permutation and relative importance")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_importance)

    p = sub.add_parser("pdp", parents=[common], help="partial dependence curve or surface")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--feature", required=True)
    p.add_argument("--feature2")
    p.add_argument("--output", choices=["sigma", "gamma", "quantile"], default="sigma")
    p.add_argument("--tau", type=float)
    p.add_argument("--grid", type=int, default=50)
    p.add_argument("--out", default="pdp.csv")
    p.set_defaults(handler=cmd_pdp)

    p = sub.add_parser("qq", parents=[common], help="exponential QQ residuals of the tail fit")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target")
    p.add_argument("--out", default="qq.csv")
    p.set_defaults(handler=cmd_qq)

    p = sub.add_parser("simulate", parents=[common], help="simulation benchmark")
    p.add_argument("--model-id", dest="model_id", type=int, choices=[1, 2], required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--d", type=int)
    p.add_argument("--R", type=int, default=20)
    p.add_argument("--taus", default="0.99,0.995,0.9995")
    p.add_argument("--tau0", type=float)
    p.add_argument("--n-trees", dest="n_trees", type=int)
    p.add_argument("--points", type=int, default=4096)
    p.add_argument("--no-cv", dest="no_cv", action="store_true",
                   help="keep the default tree count instead of choosing it by cross-validation")
    p.add_argument("--out", default="results")
    p.set_defaults(handler=cmd_simulate)
    return parser


CONFIG_FLAGS = ("seed", "threads", "log_level", "tau0", "n_trees", "depth_sigma", "depth_gamma",
                "cv_max_trees", "cv_folds", "cv_repeats")


def main(argv: Optional[Sequence[str]] = None) -> int:
    colorama_init()
    args = build_parser().parse_args(argv)
    try:
        overrides = {k: getattr(args, k) for k in CONFIG_FLAGS if hasattr(args, k)}
        if args.command == "simulate":
            # the tree count of the simulation study is not a config override
            overrides.pop("n_trees", None)
        config = load_config(args.config, overrides)
        setup_logging(config["log_level"], config["log_file"])
        logger.info(f"Tailgrove {args.command}")
        return args.handler(args, config)
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        report_error(e)
        return exit_code_for(e)


if __name__ == '__main__':
    sys.exit(main())
