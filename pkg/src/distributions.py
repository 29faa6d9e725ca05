"""
Exponential family observation densities with canonical-style links
gaussian (identity), poisson (log), binomial (logit), gamma (log),
negative-binomial (log)
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln

from .errors import DataError

LOG2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class DensityEval:
    """log p(y | theta), its first two theta-derivatives and the moment maps"""

    logp: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    mean: np.ndarray
    var: np.ndarray


def _check_support(dist: str, y: np.ndarray, u: np.ndarray):
    if dist == "gaussian":
        if np.any(u <= 0):
            raise DataError("gaussian variance u must be positive")
        return
    if np.any(u <= 0):
        raise DataError(f"{dist} parameter u must be positive")
    if dist in ("poisson", "negative-binomial") and np.any(y < 0):
        raise DataError(f"{dist} observations must be nonnegative")
    if dist == "binomial" and (np.any(y < 0) or np.any(y > u)):
        raise DataError("binomial observations must lie in [0, u]")
    if dist == "gamma" and np.any(y <= 0):
        raise DataError("gamma observations must be positive")


def density_eval(dist: str, y, u, theta) -> DensityEval:
    """
    Evaluate an observation density on the signal scale

    Args:
        dist: Distribution name
        y: Observations
        u: Variance (gaussian), exposure (poisson), size (binomial),
            shape (gamma) or dispersion (negative-binomial)
        theta: Signal values

    Returns:
        DensityEval with elementwise arrays; all normalizing constants included
    """
    y, u, theta = np.broadcast_arrays(
        np.asarray(y, dtype=float), np.asarray(u, dtype=float), np.asarray(theta, dtype=float)
    )
    _check_support(dist, y, u)

    if dist == "gaussian":
        r = y - theta
        logp = -0.5 * (LOG2PI + np.log(u) + r**2 / u)
        return DensityEval(logp, r / u, -1.0 / u, theta, u.copy())

    if dist == "poisson":
        mu = u * np.exp(theta)
        logp = y * (np.log(u) + theta) - mu - gammaln(y + 1)
        return DensityEval(logp, y - mu, -mu, mu, mu)

    if dist == "binomial":
        pi = expit(theta)
        logp = (
            gammaln(u + 1)
            - gammaln(y + 1)
            - gammaln(u - y + 1)
            + y * theta
            - u * np.logaddexp(0.0, theta)
        )
        mean = u * pi
        var = u * pi * (1 - pi)
        return DensityEval(logp, y - mean, -var, mean, var)

    if dist == "gamma":
        mu = np.exp(theta)
        ratio = y * u * np.exp(-theta)
        logp = u * np.log(u) - u * theta + (u - 1) * np.log(y) - ratio - gammaln(u)
        return DensityEval(logp, ratio - u, -ratio, mu, mu**2 / u)

    if dist == "negative-binomial":
        mu = np.exp(theta)
        logp = (
            gammaln(y + u)
            - gammaln(u)
            - gammaln(y + 1)
            + u * np.log(u)
            + y * theta
            - (u + y) * np.logaddexp(np.log(u), theta)
        )
        share = mu / (mu + u)
        d1 = y - (u + y) * share
        d2 = -(u + y) * share * u / (mu + u)
        return DensityEval(logp, d1, d2, mu, mu + mu**2 / u)

    raise DataError(f"unknown distribution '{dist}'")


def inverse_link(dist: str, theta, u=1.0) -> np.ndarray:
    """Mean of y given theta"""
    theta = np.asarray(theta, dtype=float)
    if dist == "gaussian":
        return theta
    if dist == "poisson":
        return u * np.exp(theta)
    if dist == "binomial":
        return u * expit(theta)
    if dist in ("gamma", "negative-binomial"):
        return np.exp(theta)
    raise DataError(f"unknown distribution '{dist}'")


def variance_function(dist: str, theta, u=1.0) -> np.ndarray:
    """VAR(y | theta); for gaussian series u is the observation variance"""
    theta = np.asarray(theta, dtype=float)
    if dist == "gaussian":
        return np.broadcast_to(np.asarray(u, dtype=float), theta.shape).copy()
    if dist == "poisson":
        return u * np.exp(theta)
    if dist == "binomial":
        pi = expit(theta)
        return u * pi * (1 - pi)
    if dist == "gamma":
        return np.exp(2 * theta) / u
    if dist == "negative-binomial":
        mu = np.exp(theta)
        return mu + mu**2 / u
    raise DataError(f"unknown distribution '{dist}'")


def draw(dist: str, theta, u, rng: np.random.Generator) -> np.ndarray:
    """Sample y ~ p(y | theta) elementwise"""
    theta = np.asarray(theta, dtype=float)
    u = np.broadcast_to(np.asarray(u, dtype=float), theta.shape)
    if dist == "gaussian":
        return theta + np.sqrt(u) * rng.standard_normal(theta.shape)
    if dist == "poisson":
        return rng.poisson(u * np.exp(theta)).astype(float)
    if dist == "binomial":
        return rng.binomial(np.round(u).astype(np.int64), expit(theta)).astype(float)
    if dist == "gamma":
        return rng.gamma(shape=u, scale=np.exp(theta) / u)
    if dist == "negative-binomial":
        mu = np.exp(theta)
        return rng.negative_binomial(u, u / (u + mu)).astype(float)
    raise DataError(f"unknown distribution '{dist}'")
