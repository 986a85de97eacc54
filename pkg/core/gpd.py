"""
GPD Module
Generalized Pareto tail model: distribution functions, deviance with its
analytic derivatives, unconditional maximum likelihood and tail-quantile
extrapolation

All functions broadcast over numpy arrays and return plain floats for
scalar input.
"""

import logging
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np
from scipy import optimize

from core.errors import ConvergenceError, DomainError, PreconditionError

logger = logging.getLogger(__name__)

# Below this |gamma| every formula switches to its expansion around gamma = 0
GAMMA_EPS = 1e-6

# Smallest admissible value of 1 + gamma * z / sigma
SUPPORT_FLOOR = 1e-10

MLE_SIGMA_BOUNDS = (1e-8, 1e8)
MLE_GAMMA_BOUNDS = (-0.45, 5.0)
MLE_MIN_EXCEEDANCES = 5


@dataclass(frozen=True)
class GpdParams:
    """Scale and shape of a generalized Pareto distribution"""

    sigma: float
    gamma: float

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise DomainError(f"sigma must be positive and finite, got {self.sigma}")
        if not np.isfinite(self.gamma):
            raise DomainError(f"gamma must be finite, got {self.gamma}")

    def __iter__(self) -> Iterator[float]:
        yield self.sigma
        yield self.gamma


def _broadcast(*values) -> Tuple[bool, list]:
    scalar = all(np.ndim(v) == 0 for v in values)
    arrays = np.broadcast_arrays(*[np.asarray(v, dtype=float) for v in values])
    return scalar, arrays


def _finish(result: np.ndarray, scalar: bool):
    return float(result) if scalar else result


@np.errstate(over="ignore", invalid="ignore", divide="ignore")
def gpd_cdf(y, sigma, gamma):
    """
    Distribution function H(y) of the GPD

    Args:
        y: Nonnegative values
        sigma: Scale (> 0)
        gamma: Shape

    Returns:
        Probabilities in [0, 1]; 1 beyond the upper endpoint when gamma < 0
    """
    scalar, (y, sigma, gamma) = _broadcast(y, sigma, gamma)
    if np.any(y < 0):
        raise DomainError("GPD distribution function is defined for y >= 0 only")

    small = np.abs(gamma) < GAMMA_EPS
    t = y / sigma
    gt = gamma * t
    inside = gt > -1.0
    g_safe = np.where(small, 1.0, gamma)
    log_u = np.log1p(np.where(inside, gt, 0.0))

    general = np.where(inside, -np.expm1(-log_u / g_safe), 1.0)
    limit = -np.expm1(-t)
    return _finish(np.where(small, limit, general), scalar)


@np.errstate(over="ignore", invalid="ignore", divide="ignore")
def gpd_cumulative_hazard(y, sigma, gamma):
    """-log(1 - H(y)); standard exponential when y follows the GPD. inf beyond the upper endpoint"""
    scalar, (y, sigma, gamma) = _broadcast(y, sigma, gamma)
    if np.any(y < 0):
        raise DomainError("GPD cumulative hazard is defined for y >= 0 only")

    small = np.abs(gamma) < GAMMA_EPS
    t = y / sigma
    gt = gamma * t
    inside = gt > -1.0
    g_safe = np.where(small, 1.0, gamma)
    general = np.where(inside, np.log1p(np.where(inside, gt, 0.0)) / g_safe, np.inf)
    return _finish(np.where(small, t, general), scalar)


def gpd_quantile(p, sigma, gamma):
    """Inverse of gpd_cdf for probabilities in [0, 1)"""
    scalar, (p, sigma, gamma) = _broadcast(p, sigma, gamma)
    if np.any((p < 0) | (p >= 1)) or np.any(np.isnan(p)):
        raise DomainError("GPD quantile requires 0 <= p < 1")

    small = np.abs(gamma) < GAMMA_EPS
    log_tail = np.log1p(-p)
    g_safe = np.where(small, 1.0, gamma)
    general = sigma * np.expm1(-gamma * log_tail) / g_safe
    limit = -sigma * log_tail
    return _finish(np.where(small, limit, general), scalar)


def gpd_sample(size, sigma: float, gamma: float, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Draw GPD variates by inverting the distribution function"""
    rng = rng if rng is not None else np.random.default_rng()
    return gpd_quantile(rng.random(size), sigma, gamma)


def _support(z, sigma, gamma):
    """Shared pieces of the deviance and its derivatives"""
    t = z / sigma
    small = np.abs(gamma) < GAMMA_EPS
    gt = gamma * t
    violation = ~small & (1.0 + gt <= SUPPORT_FLOOR)
    g_safe = np.where(small, 1.0, gamma)
    # clamp onto 1 + gamma * t = SUPPORT_FLOOR
    t_eff = np.where(violation, (SUPPORT_FLOOR - 1.0) / g_safe, t)
    u = np.where(violation, SUPPORT_FLOOR, 1.0 + gt)
    log_u = np.where(violation, np.log(SUPPORT_FLOOR), np.log1p(np.where(violation, 0.0, gt)))
    return t, t_eff, u, log_u, small, violation, g_safe


@np.errstate(over="ignore", invalid="ignore", divide="ignore")
def deviance(z, sigma, gamma):
    """
    Negative GPD log-likelihood of exceedances z

    Zero for z = 0. Below the support (gamma < 0 and 1 + gamma*z/sigma at or
    under SUPPORT_FLOOR) the value at the floor is extended linearly in
    1 + gamma*z/sigma.
    """
    scalar, (z, sigma, gamma) = _broadcast(z, sigma, gamma)
    if np.any(sigma <= 0):
        raise DomainError("sigma must be positive")

    t, _, _, log_u, small, violation, g_safe = _support(z, sigma, gamma)
    log_sigma = np.log(sigma)
    coef = 1.0 + 1.0 / g_safe

    general = coef * log_u + log_sigma
    excess = gamma * t - (SUPPORT_FLOOR - 1.0)
    general = np.where(violation, general + coef / SUPPORT_FLOOR * excess, general)

    series = (t + log_sigma
              + gamma * (t - t ** 2 / 2.0)
              + gamma ** 2 * (t ** 3 / 3.0 - t ** 2 / 2.0)
              + gamma ** 3 * (t ** 3 / 3.0 - t ** 4 / 4.0))

    out = np.where(small, series, general)
    return _finish(np.where(z > 0, out, 0.0), scalar)


@np.errstate(over="ignore", invalid="ignore", divide="ignore")
def deviance_grad(z, sigma, gamma):
    """
    First partial derivatives of the deviance

    Returns:
        (d_sigma, d_gamma), zero where z = 0
    """
    scalar, (z, sigma, gamma) = _broadcast(z, sigma, gamma)
    t, t_eff, u, log_u, small, _, g_safe = _support(z, sigma, gamma)

    d_sigma = (1.0 - (1.0 + gamma) * t_eff / u) / sigma

    general = -log_u / g_safe ** 2 + (1.0 + 1.0 / g_safe) * t_eff / u
    series = (t - t ** 2 / 2.0
              + gamma * (2.0 * t ** 3 / 3.0 - t ** 2)
              + gamma ** 2 * (t ** 3 - 0.75 * t ** 4))
    d_gamma = np.where(small, series, general)

    pos = z > 0
    return (_finish(np.where(pos, d_sigma, 0.0), scalar),
            _finish(np.where(pos, d_gamma, 0.0), scalar))


@np.errstate(over="ignore", invalid="ignore", divide="ignore")
def deviance_hessian_diag(z, sigma, gamma):
    """
    Second partial derivatives of the deviance with respect to sigma and gamma

    Returns:
        (d2_sigma, d2_gamma), zero where z = 0
    """
    scalar, (z, sigma, gamma) = _broadcast(z, sigma, gamma)
    t, t_eff, u, log_u, small, _, g_safe = _support(z, sigma, gamma)

    d2_sigma = (t_eff + (t_eff - 1.0) / u) / (sigma ** 2 * u)

    general = (2.0 * log_u / g_safe ** 3
               - 2.0 * t_eff / (g_safe ** 2 * u)
               - (1.0 + 1.0 / g_safe) * t_eff ** 2 / u ** 2)
    series = -t ** 2 + 2.0 * t ** 3 / 3.0 + gamma * (2.0 * t ** 3 - 1.5 * t ** 4)
    d2_gamma = np.where(small, series, general)

    pos = z > 0
    return (_finish(np.where(pos, d2_sigma, 0.0), scalar),
            _finish(np.where(pos, d2_gamma, 0.0), scalar))


def fit_unconditional_mle(zs) -> GpdParams:
    """
    Maximum likelihood GPD fit without covariates

    Nelder-Mead on (log sigma, gamma) inside the box
    sigma in MLE_SIGMA_BOUNDS, gamma in MLE_GAMMA_BOUNDS, started at
    (mean(z), 0.1).

    Args:
        zs: Strictly positive exceedances (at least 5)

    Returns:
        GpdParams at the minimum of the summed deviance
    """
    z = np.asarray(zs, dtype=float).ravel()
    if z.size < MLE_MIN_EXCEEDANCES:
        raise PreconditionError(
            f"need at least {MLE_MIN_EXCEEDANCES} exceedances for the MLE, got {z.size}"
        )
    if not np.all(np.isfinite(z)) or np.any(z <= 0):
        raise DomainError("MLE exceedances must be positive and finite")
    if np.ptp(z) == 0:
        raise ConvergenceError("degenerate likelihood: all exceedances are identical")

    def objective(theta: np.ndarray) -> float:
        return float(np.sum(deviance(z, np.exp(theta[0]), theta[1])))

    bounds = [tuple(np.log(MLE_SIGMA_BOUNDS)), MLE_GAMMA_BOUNDS]
    options = {"xatol": 1e-10, "fatol": 1e-10, "maxiter": 4000, "maxfev": 8000}
    start = np.array([np.log(z.mean()), 0.1])

    first = optimize.minimize(objective, start, method="Nelder-Mead", bounds=bounds, options=options)
    # restart from the first optimum with a fresh simplex
    second = optimize.minimize(objective, first.x, method="Nelder-Mead", bounds=bounds, options=options)
    best = second if second.fun <= first.fun else first

    if not np.isfinite(best.fun):
        raise ConvergenceError(f"GPD likelihood did not converge: {best.message}")
    if not best.success:
        logger.warning(f"GPD MLE stopped early ({best.message}); using best point found")

    params = GpdParams(float(np.exp(best.x[0])), float(best.x[1]))
    logger.debug(f"Unconditional GPD fit on {z.size} exceedances: "
                 f"sigma={params.sigma:.4g}, gamma={params.gamma:.4g}")
    return params


def extreme_quantile(q_tau0, sigma, gamma, tau0: float, tau):
    """
    Extrapolate an intermediate quantile to a higher level with a GPD tail

    q_tau0 + sigma * (((1 - tau) / (1 - tau0)) ** -gamma - 1) / gamma,
    with the limit q_tau0 + sigma * log((1 - tau0) / (1 - tau)) as gamma -> 0.
    """
    scalar, (q, sigma, gamma, tau) = _broadcast(q_tau0, sigma, gamma, tau)
    if not 0.0 < tau0 < 1.0:
        raise DomainError(f"tau0 must lie in (0, 1), got {tau0}")
    if np.any(tau >= 1.0) or np.any(np.isnan(tau)):
        raise DomainError("tau must be below 1")
    if np.any(tau < tau0):
        raise DomainError("tau below tau0")

    log_ratio = np.log((1.0 - tau) / (1.0 - tau0))
    small = np.abs(gamma) < GAMMA_EPS
    g_safe = np.where(small, 1.0, gamma)
    general = sigma * np.expm1(-gamma * log_ratio) / g_safe
    limit = -sigma * log_ratio
    return _finish(q + np.where(small, limit, general), scalar)
