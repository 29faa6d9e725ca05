"""
Log-likelihoods of state space models
Gaussian and diffuse likelihoods from the filter terms, importance sampling
corrected likelihood for non-gaussian models, and the REML variance shortcut
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .approx import approximate
from .errors import ApproxError, UndefinedError
from .filtering import STEP_DIFFUSE_ZERO, STEP_REGULAR, FilterResult, kalman_filter
from .model import StateSpaceModel
from .simulation import importance_sample

logger = logging.getLogger("Likelihood")


@dataclass(frozen=True)
class LogLik:
    """A log-likelihood value with how it was computed"""

    value: float
    method: str
    nsim: int = 0
    mc_se: float = 0.0
    seed: Optional[int] = None

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.value))

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "method": self.method,
            "nsim": self.nsim,
            "mc_se": self.mc_se,
            "seed": self.seed,
        }


def loglik_gaussian(fr: FilterResult) -> LogLik:
    """
    Diffuse log-likelihood -1/2 sum w_{t,i}

    Diffuse steps contribute log F_inf, regular steps with F > 0 contribute
    log 2pi + log F + v^2 / F.
    """
    value = float(-0.5 * fr.logL_terms.sum())
    if not np.isfinite(value):
        logger.warning("Log-likelihood is not finite")
    return LogLik(value=value, method="diffuse" if fr.d > 0 else "gaussian")


def log_mean_exp(logw: np.ndarray) -> float:
    return float(logsumexp(logw) - np.log(logw.size))


def importance_mc_se(logw: np.ndarray, block: int = 1) -> float:
    """
    Delta-method standard error of log(mean w)

    Dependent draws (antithetic blocks) are averaged before the variance
    is taken.
    """
    w = np.exp(logw - logw.max())
    if block > 1 and w.size % block == 0:
        w = w.reshape(-1, block).mean(axis=1)
    if w.size < 2:
        return 0.0
    return float(w.std(ddof=1) / (np.sqrt(w.size) * w.mean()))


def loglik_nongaussian(
    model: StateSpaceModel,
    nsim: int = 0,
    seed=None,
    antithetics: bool = True,
    approx=None,
) -> LogLik:
    """
    Log-likelihood of a model with non-gaussian series

    Args:
        model: State space model
        nsim: Number of independent importance draws (0 uses the mode only)
        seed: Seed for the importance sample
        antithetics: Use location and scale antithetic draws
        approx: Optional precomputed ApproximationResult

    Returns:
        LogLik equal to log L_g + log w(theta_hat) [+ log mean w*]
    """
    if model.gaussian:
        return loglik_gaussian(kalman_filter(model))
    if approx is None:
        approx = approximate(model)
    if not approx.converged:
        raise ApproxError("gaussian approximation did not converge")
    value = approx.logLg + approx.log_what
    if nsim <= 0:
        return LogLik(value=value, method="approx-N0", nsim=0)

    sample = importance_sample(model, "signals", nsim, seed, antithetics, approx=approx)
    logw = sample.logweights
    value += log_mean_exp(logw)
    mc_se = importance_mc_se(logw, block=4 if antithetics else 1)
    return LogLik(
        value=value,
        method="importance",
        nsim=nsim,
        mc_se=mc_se,
        seed=seed if isinstance(seed, (int, np.integer)) else None,
    )


def reml_variance(fr: FilterResult) -> float:
    """
    Restricted ML estimate of a common observation variance

    The filter must have been run with unit observation variance; the
    estimate averages v^2 / F over every step with F_inf = 0, including
    diffuse-phase steps whose row is already resolved.
    """
    proper = np.isin(fr.steps, (STEP_REGULAR, STEP_DIFFUSE_ZERO)) & (fr.F > 0)
    count = int(proper.sum())
    if count == 0:
        raise UndefinedError("no non-diffuse observations to estimate the variance")
    return float(np.sum(fr.v[proper] ** 2 / fr.F[proper]) / count)


@dataclass(frozen=True)
class RemlResult:
    """REML variance with the final state estimates of the rescaled model"""

    sigma2: float
    coefficients: np.ndarray
    covariance: np.ndarray
    model: StateSpaceModel
    filter: FilterResult


def reml_fit(model: StateSpaceModel) -> RemlResult:
    """
    Two-pass REML fit of a regression-type gaussian model

    The first pass uses H = 1, the second H = sigma2_hat so that P_{n+1}
    is the covariance of the coefficients.
    """
    unit = model.replace(H=np.eye(model.p))
    sigma2 = reml_variance(kalman_filter(unit))
    scaled = model.replace(H=np.eye(model.p) * sigma2)
    fr = kalman_filter(scaled)
    logger.info(f"REML variance estimate {sigma2:.6g}")
    return RemlResult(
        sigma2=sigma2,
        coefficients=fr.a[-1].copy(),
        covariance=fr.P[-1].copy(),
        model=scaled,
        filter=fr,
    )
