"""
Simulation Module
Synthetic heavy-tailed regression models with known conditional
quantiles, Halton-point integration of squared quantile errors, and
replicated comparison of the boosted tail against simpler methods
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import special, stats

from core.boosting import BoostParams, fit_gpd_boost
from core.diagnostics import CvOptions, select_trees
from core.errors import DomainError, PreconditionError, TailgroveError
from core.gpd import extreme_quantile, fit_unconditional_mle
from core.pipeline import DEFAULT_TAU0, compute_exceedances
from core.quantile_forest import ForestConfig, fit_forest

logger = logging.getLogger(__name__)

MODEL_DIMENSIONS = {1: 40, 2: 10}
MODEL1_DF = 4.0
MODEL2_CORRELATION = 0.9
MIN_ISE_POINTS = 1024
DEFAULT_ISE_POINTS = 4096
METHODS = ("boosted", "constant", "forest_direct")

# Number of boosting trees chosen per replication by one round of 5-fold CV
DEFAULT_STUDY_CV = CvOptions(folds=5, repeats=1, max_trees=500)

# Keeps inverse-CDF sampling away from the infinite quantiles at 0 and 1
_UNIFORM_EPS = 1e-16

Predictor = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class SimModelSpec:
    """Which synthetic model to draw from, and how much"""

    model_id: int
    n: int
    seed: int = 0
    d: Optional[int] = None

    def __post_init__(self):
        if self.model_id not in MODEL_DIMENSIONS:
            raise DomainError(f"unknown simulation model {self.model_id}")
        if self.n < 1:
            raise DomainError(f"n must be positive, got {self.n}")
        if self.d is None:
            object.__setattr__(self, "d", MODEL_DIMENSIONS[self.model_id])
        minimum = 1 if self.model_id == 1 else 2
        if self.d < minimum:
            raise DomainError(f"model {self.model_id} needs at least {minimum} covariates")

    def generate(self, seed: Optional[int] = None) -> "SimulatedData":
        seed = self.seed if seed is None else seed
        generator = gen_model1 if self.model_id == 1 else gen_model2
        return generator(self.n, seed, self.d)


def _model2_density(X: np.ndarray) -> np.ndarray:
    cov = [[1.0, MODEL2_CORRELATION], [MODEL2_CORRELATION, 1.0]]
    return np.atleast_1d(stats.multivariate_normal(mean=[0.0, 0.0], cov=cov).pdf(X[:, :2]))


def model1_scale(X) -> np.ndarray:
    X = np.atleast_2d(X)
    return 1.0 + (X[:, 0] > 0)


def model2_df(X) -> np.ndarray:
    X = np.atleast_2d(X)
    return 7.0 / (1.0 + np.exp(4.0 * X[:, 0] + 1.2)) + 3.0


def model2_scale(X) -> np.ndarray:
    return 1.0 + 6.0 * _model2_density(np.atleast_2d(X))


@dataclass
class SimulatedData:
    """Covariates, responses and the analytic conditional quantiles of one draw"""

    X: np.ndarray
    Y: np.ndarray
    model_id: int

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def truth(self, X, tau: float) -> np.ndarray:
        """True conditional tau-quantile at each row of X"""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.model_id == 1:
            return model1_scale(X) * special.stdtrit(MODEL1_DF, tau)
        return model2_scale(X) * special.stdtrit(model2_df(X), tau)

    def true_gamma(self, X) -> np.ndarray:
        """Tail index of the conditional distribution (1 / degrees of freedom)"""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.model_id == 1:
            return np.full(len(X), 1.0 / MODEL1_DF)
        return 1.0 / model2_df(X)


def _student_t(rng: np.random.Generator, df, n: int) -> np.ndarray:
    u = np.clip(rng.random(n), _UNIFORM_EPS, 1.0 - _UNIFORM_EPS)
    return special.stdtrit(df, u)


def gen_model1(n: int, seed: int = 0, d: int = MODEL_DIMENSIONS[1]) -> SimulatedData:
    """Student-t(4) responses whose scale doubles when the first covariate is positive"""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, size=(n, d))
    Y = model1_scale(X) * _student_t(rng, MODEL1_DF, n)
    return SimulatedData(X=X, Y=Y, model_id=1)


def gen_model2(n: int, seed: int = 0, d: int = MODEL_DIMENSIONS[2]) -> SimulatedData:
    """Student-t responses with covariate-dependent degrees of freedom and scale"""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, size=(n, d))
    Y = model2_scale(X) * _student_t(rng, model2_df(X), n)
    return SimulatedData(X=X, Y=Y, model_id=2)


def first_primes(count: int) -> List[int]:
    primes: List[int] = []
    candidate = 2
    while len(primes) < count:
        if all(candidate % p for p in primes if p * p <= candidate):
            primes.append(candidate)
        candidate += 1
    return primes


def halton(index: int, base: int) -> float:
    """Radical inverse of index in the given base"""
    if index < 1:
        raise DomainError(f"Halton index must be >= 1, got {index}")
    if base < 2:
        raise DomainError(f"Halton base must be >= 2, got {base}")
    num, den = 0, 1
    while index > 0:
        index, digit = divmod(index, base)
        num = num * base + digit
        den *= base
    return num / den


def halton_points(n_points: int, d: int, start: int = 1) -> np.ndarray:
    """
    Halton points in the first d prime bases, mapped to [-1, 1]^d

    Row k uses index start + k.
    """
    if n_points < 1 or d < 1 or start < 1:
        raise DomainError("Halton points need n_points, d and start >= 1")
    indices = np.arange(start, start + n_points, dtype=np.int64)
    points = np.empty((n_points, d))
    for j, base in enumerate(first_primes(d)):
        remaining = indices.copy()
        num = np.zeros(n_points, dtype=np.int64)
        den = np.ones(n_points, dtype=np.int64)
        while np.any(remaining > 0):
            active = remaining > 0
            remaining, digit = np.divmod(remaining, base)
            num = np.where(active, num * base + digit, num)
            den = np.where(active, den * base, den)
        points[:, j] = num / den
    return 2.0 * points - 1.0


def ise(pred: Predictor, truth: Predictor, d: int, n_points: int = DEFAULT_ISE_POINTS,
        tau: Optional[float] = None) -> float:
    """
    Mean squared difference of two surfaces over Halton points in [-1, 1]^d

    ``pred`` and ``truth`` take a point matrix (and tau, when given).
    """
    if n_points < MIN_ISE_POINTS:
        raise PreconditionError(f"integration needs at least {MIN_ISE_POINTS} points, got {n_points}")
    points = halton_points(n_points, d)
    args = (points,) if tau is None else (points, tau)
    diff = np.asarray(pred(*args), dtype=float) - np.asarray(truth(*args), dtype=float)
    return float(np.mean(diff ** 2))


@dataclass
class IseResult:
    """Per-replication integrated squared errors of one method at one level"""

    method: str
    tau: float
    ise: np.ndarray
    failures: int = 0

    @property
    def mise(self) -> float:
        ok = self.ise[np.isfinite(self.ise)]
        return float(np.mean(ok)) if ok.size else float("nan")


def default_study_params(model_id: int) -> BoostParams:
    """Boosting settings used for the synthetic models"""
    if model_id == 1:
        return BoostParams(depth_sigma=1, depth_gamma=1, lambda_ratio=15.0, subsample=0.75)
    return BoostParams(depth_sigma=3, depth_gamma=1, lambda_ratio=7.0, subsample=0.75)


def _replication_seed(seed: int, replication: int) -> int:
    return int(np.random.SeedSequence([seed, replication]).generate_state(1)[0])


def _run_replication(spec: SimModelSpec, replication: int, taus: Sequence[float], methods: Sequence[str],
                     tau0: float, boost_params: BoostParams, forest_config: ForestConfig,
                     cv: Optional[CvOptions], points: np.ndarray,
                     custom_methods: Dict[str, Callable]) -> Dict[str, np.ndarray]:
    data = spec.generate(_replication_seed(spec.seed, replication))
    truth = np.column_stack([data.truth(points, t) for t in taus])
    errors: Dict[str, np.ndarray] = {}

    def score(pred: np.ndarray) -> np.ndarray:
        return np.mean((pred - truth) ** 2, axis=0)

    def failed(method: str, exc: Exception) -> None:
        logger.warning(f"Replication {replication}: method {method} failed ({type(exc).__name__}: {exc})")
        errors[method] = np.full(len(taus), np.nan)

    forest_methods = [m for m in methods if m in METHODS]
    if forest_methods:
        try:
            forest = fit_forest(data.X, data.Y, forest_config)
            z = compute_exceedances(forest, data.X, data.Y, tau0)
            q0 = forest.predict_quantile(points, tau0)
        except TailgroveError as exc:
            for m in forest_methods:
                failed(m, exc)
            forest_methods = []

    for method in forest_methods:
        try:
            if method == "boosted":
                params = boost_params
                positive = z > 0
                if cv is not None:
                    chosen = select_trees(data.X[positive], z[positive], params, cv)
                    params = params.with_updates(n_trees=chosen.n_trees, depth_sigma=chosen.depths[0],
                                                 depth_gamma=chosen.depths[1])
                model = fit_gpd_boost(data.X[positive], z[positive], params)
                sigma, gamma = model.predict_params(points)
                pred = np.column_stack([extreme_quantile(q0, sigma, gamma, tau0, t) for t in taus])
            elif method == "constant":
                tail = fit_unconditional_mle(z[z > 0])
                pred = np.column_stack([extreme_quantile(q0, tail.sigma, tail.gamma, tau0, t) for t in taus])
            else:
                pred = np.atleast_2d(forest.predict_quantile(points, list(taus)))
            errors[method] = score(pred)
        except TailgroveError as exc:
            failed(method, exc)

    for method, build in custom_methods.items():
        try:
            predictor = build(data, taus)
            errors[method] = score(np.column_stack([predictor(points, t) for t in taus]))
        except TailgroveError as exc:
            failed(method, exc)
    return errors


def run_comparison(spec: SimModelSpec, taus: Sequence[float], replications: int,
                   methods: Optional[Sequence[str]] = None, tau0: float = DEFAULT_TAU0,
                   boost_params: Optional[BoostParams] = None, forest_config: Optional[ForestConfig] = None,
                   cv: Optional[CvOptions] = DEFAULT_STUDY_CV, n_points: int = DEFAULT_ISE_POINTS,
                   custom_methods: Optional[Dict[str, Callable]] = None, n_jobs: int = 1) -> List[IseResult]:
    """
    Replicated comparison of quantile methods on a synthetic model

    Each replication draws fresh data from a seed derived from
    (spec.seed, replication), fits every method and scores it against the
    analytic quantiles at Halton points. ``custom_methods`` maps a label
    to a callable (data, taus) -> predictor(points, tau). A method that
    raises a package error scores NaN for that replication and is counted
    as a failure.

    The boosted method picks its number of trees per replication by
    cross-validation with ``cv``; pass None to keep boost_params.n_trees.

    Returns:
        One IseResult per (method, tau), methods in the order given
    """
    methods = list(METHODS if methods is None else methods)
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise DomainError(f"unknown methods: {', '.join(unknown)}")
    custom_methods = dict(custom_methods or {})
    taus = [float(t) for t in taus]
    if any(t < tau0 or t >= 1.0 for t in taus):
        raise DomainError("simulation levels must lie in [tau0, 1)")
    if replications < 1:
        raise DomainError(f"need at least one replication, got {replications}")
    if n_points < MIN_ISE_POINTS:
        raise PreconditionError(f"integration needs at least {MIN_ISE_POINTS} points, got {n_points}")

    boost_params = boost_params or default_study_params(spec.model_id)
    forest_config = forest_config or ForestConfig()
    points = halton_points(n_points, spec.d)

    outcomes = Parallel(n_jobs=n_jobs)(
        delayed(_run_replication)(spec, r, taus, methods, tau0, boost_params, forest_config, cv,
                                  points, custom_methods)
        for r in range(replications)
    )

    results = []
    for method in methods + list(custom_methods):
        table = np.array([o[method] for o in outcomes])
        failures = int(np.sum(~np.isfinite(table[:, 0])))
        for k, tau in enumerate(taus):
            results.append(IseResult(method=method, tau=tau, ise=table[:, k], failures=failures))
    for res in results:
        logger.info(f"MISE {res.method} at tau={res.tau:g}: {res.mise:.6g} ({res.failures} failed)")
    return results


def comparison_frames(results: Sequence[IseResult]) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Per-replication and summary tables with one column per method

    The per-replication table keeps only replications in which every
    method succeeded.
    """
    methods = list(dict.fromkeys(r.method for r in results))
    taus = list(dict.fromkeys(r.tau for r in results))
    by_key = {(r.method, r.tau): r for r in results}

    rows = []
    for tau in taus:
        n_rep = len(by_key[(methods[0], tau)].ise)
        for rep in range(n_rep):
            values = [by_key[(m, tau)].ise[rep] for m in methods]
            if np.all(np.isfinite(values)):
                rows.append([rep, tau] + values)
    per_rep = pd.DataFrame(rows, columns=["replication", "tau"] + [f"ise_{m}" for m in methods])

    summary = pd.DataFrame({"tau": taus})
    for m in methods:
        summary[f"mise_{m}"] = [by_key[(m, t)].mise for t in taus]
        summary[f"failures_{m}"] = [by_key[(m, t)].failures for t in taus]
    return per_rep, summary
