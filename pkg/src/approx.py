"""
Gaussian approximation of exponential family state space models
The approximating model replaces each non-gaussian observation by a
pseudo-observation whose smoothed signal is the posterior mode of theta
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logit

from .distributions import LOG2PI, density_eval, inverse_link, variance_function
from .errors import ApproxError, NumericError
from .filtering import FilterResult, kalman_filter
from .model import StateSpaceModel, missing_pattern
from .smoothing import SmoothResult, smooth_states

logger = logging.getLogger("Approx")


@dataclass(frozen=True, eq=False)
class ApproximationResult:
    """
    Converged approximating gaussian model

    ``Htilde`` holds the pseudo-variances of non-gaussian cells and the H
    diagonal of gaussian cells; ``model`` is the working gaussian model.
    """

    ytilde: np.ndarray
    Htilde: np.ndarray
    thetahat: np.ndarray
    alphahat: np.ndarray
    iterations: int
    converged: bool
    logLg: float
    log_what: float
    model: StateSpaceModel
    original: StateSpaceModel
    filter: FilterResult
    smooth: SmoothResult


def initial_signal(model: StateSpaceModel) -> np.ndarray:
    """GLM-style starting values for theta"""
    y, u = model.y, model.u
    theta = np.zeros_like(y)
    with np.errstate(divide="ignore", invalid="ignore"):
        for i, dist in enumerate(model.distribution):
            yi, ui = y[:, i], u[:, i]
            if dist == "gaussian":
                col = yi.copy()
            elif dist == "poisson":
                col = np.log((yi + 0.5) / ui)
            elif dist == "binomial":
                col = logit((yi + 0.5) / (ui + 1))
            else:
                small = 0.1 * np.nanmean(yi) if np.any(~np.isnan(yi)) else 1.0
                col = np.log(np.maximum(yi, max(small, 1e-8)))
            observed = ~np.isnan(col)
            fill = col[observed].mean() if observed.any() else 0.0
            theta[:, i] = np.where(observed, col, fill)
    return theta


def _working_model(
    model: StateSpaceModel, theta: np.ndarray, observed: np.ndarray
):
    """Pseudo-observations and variances at theta"""
    n, p = model.n, model.p
    ytilde = model.y.copy()
    nongauss = model.nongaussian_series
    H = model.H
    if H.shape[2] == 1:
        H = np.repeat(H, n, axis=2)
    else:
        H = H[:, :, :n].copy()
    Htilde = np.einsum("iit->ti", H).copy()
    for i in np.flatnonzero(nongauss):
        cells = observed[:, i]
        dens = density_eval(
            model.distribution[i], model.y[cells, i], model.u[cells, i], theta[cells, i]
        )
        if np.any(dens.d2 >= 0) or not np.all(np.isfinite(dens.d2)):
            t = int(np.flatnonzero(cells)[np.argmax(~(dens.d2 < 0))])
            raise NumericError("non-negative second derivative of log density", (t, i))
        h = -1.0 / dens.d2
        col = np.full(n, np.nan)
        col[cells] = theta[cells, i] + dens.d1 * h
        ytilde[:, i] = col
        hcol = np.ones(n)
        hcol[cells] = h
        Htilde[:, i] = hcol
        H[i, i, :] = hcol
    working = model.replace(
        y=ytilde, H=H, distribution=("gaussian",) * p, u=np.ones((n, p))
    )
    return working, ytilde, Htilde


def _objective(
    model: StateSpaceModel,
    observed: np.ndarray,
    theta: np.ndarray,
    alpha: np.ndarray,
    eta: np.ndarray,
) -> float:
    """Log joint density of y and the state path, up to a constant"""
    total = 0.0
    for i, dist in enumerate(model.distribution):
        cells = observed[:, i]
        if dist == "gaussian":
            continue
        total += density_eval(dist, model.y[cells, i], model.u[cells, i], theta[cells, i]).logp.sum()
    gauss = ~model.nongaussian_series
    if gauss.any():
        for t in range(model.n):
            idx = np.flatnonzero(observed[t] & gauss)
            if idx.size:
                e = model.y[t, idx] - theta[t, idx]
                H = model.H_at(t)[np.ix_(idx, idx)]
                total -= 0.5 * e @ np.linalg.pinv(H) @ e
    for t in range(model.n):
        Q = model.Q_at(t)
        if Q.size:
            total -= 0.5 * eta[t] @ np.linalg.pinv(Q) @ eta[t]
    proper = np.diag(model.P1inf) == 0
    if proper.any():
        dev = (alpha[0] - model.a1)[proper]
        total -= 0.5 * dev @ np.linalg.pinv(model.P1[np.ix_(proper, proper)]) @ dev
    return float(total)


def approximate(
    model: StateSpaceModel,
    max_iter: int = 50,
    conv_tol: float = 1e-8,
    theta: Optional[np.ndarray] = None,
) -> ApproximationResult:
    """
    Find the gaussian model sharing the posterior mode of theta

    Args:
        model: Model with at least one non-gaussian series
        max_iter: Iteration cap
        conv_tol: Bound on max |dtheta| / (|theta| + 0.1)
        theta: Optional warm start for the signal

    Returns:
        ApproximationResult (``converged`` is False when the cap was hit)
    """
    observed = missing_pattern(model)
    if model.gaussian:
        fr = kalman_filter(model)
        sm = smooth_states(fr, model)
        return ApproximationResult(
            ytilde=model.y,
            Htilde=np.array([np.diag(model.H_at(t)) for t in range(model.n)]).reshape(
                model.n, model.p
            ),
            thetahat=sm.thetahat,
            alphahat=sm.alphahat,
            iterations=0,
            converged=True,
            logLg=_gaussian_loglik(fr),
            log_what=0.0,
            model=model,
            original=model,
            filter=fr,
            smooth=sm,
        )

    current = initial_signal(model) if theta is None else np.array(theta, dtype=float)
    state = None
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        working, _, _ = _working_model(model, current, observed)
        fr = kalman_filter(working)
        sm = smooth_states(fr, working)
        candidate = (sm.thetahat, sm.alphahat, sm.etahat)
        objective = _objective(model, observed, *candidate)
        if state is not None and objective < state[3] - 1e-10 * abs(state[3]):
            step = 1.0
            for _ in range(20):
                step /= 2
                trial = tuple(
                    old + step * (new - old) for old, new in zip(state[:3], candidate)
                )
                trial_obj = _objective(model, observed, *trial)
                if trial_obj >= state[3]:
                    candidate, objective = trial, trial_obj
                    break
            else:
                logger.debug("Step halving failed to improve the objective")
                candidate, objective = trial, trial_obj
        if not np.all(np.isfinite(candidate[0])):
            raise ApproxError(f"approximation diverged at iteration {iterations}")
        change = np.max(np.abs(candidate[0] - current) / (np.abs(current) + 0.1))
        state = (*candidate, objective)
        current = candidate[0]
        if change <= conv_tol:
            converged = True
            break

    if not converged:
        logger.warning(
            f"Gaussian approximation did not converge in {max_iter} iterations"
        )

    working, ytilde, Htilde = _working_model(model, current, observed)
    fr = kalman_filter(working)
    sm = smooth_states(fr, working)
    log_what = _log_weight_at(model, observed, current, ytilde, Htilde)
    logger.debug(f"Approximation finished after {iterations} iterations")
    return ApproximationResult(
        ytilde=ytilde,
        Htilde=Htilde,
        thetahat=current,
        alphahat=sm.alphahat,
        iterations=iterations,
        converged=converged,
        logLg=_gaussian_loglik(fr),
        log_what=log_what,
        model=working,
        original=model,
        filter=fr,
        smooth=sm,
    )


def _gaussian_loglik(fr: FilterResult) -> float:
    return float(-0.5 * fr.logL_terms.sum())


def log_pseudo_density(
    ytilde: np.ndarray, Htilde: np.ndarray, theta: np.ndarray
) -> np.ndarray:
    """log g(ytilde | theta) for the pseudo-observations (elementwise)"""
    return -0.5 * (LOG2PI + np.log(Htilde) + (ytilde - theta) ** 2 / Htilde)


def _log_weight_at(model, observed, theta, ytilde, Htilde) -> float:
    total = 0.0
    for i in np.flatnonzero(model.nongaussian_series):
        cells = observed[:, i]
        logp = density_eval(
            model.distribution[i], model.y[cells, i], model.u[cells, i], theta[cells, i]
        ).logp
        logg = log_pseudo_density(ytilde[cells, i], Htilde[cells, i], theta[cells, i])
        total += float(np.sum(logp - logg))
    return total


@dataclass(frozen=True)
class NonGaussianFilterResult:
    """One-step-ahead moments of the signal, its mean and the states"""

    theta: np.ndarray
    Vtheta: np.ndarray
    mu: np.ndarray
    Vmu: np.ndarray
    alpha: np.ndarray
    Valpha: np.ndarray
    Ey_var: np.ndarray


def filter_nongaussian(
    model: StateSpaceModel, nsim: int = 0, seed=None, antithetics: bool = True
) -> NonGaussianFilterResult:
    """
    Filtering by smoothing data truncated before each time point

    For each t the observations y_t..y_n are treated as missing and the
    signal at t is estimated from the approximating model (nsim = 0, delta
    method for the mean) or by importance sampling (nsim > 0, an independent
    random stream per t).

    Returns:
        NonGaussianFilterResult with per-t predictive moments; ``Ey_var`` is
        E[VAR(y_t | theta_t)] used by recursive residuals
    """
    from .simulation import importance_sample, seed_sequence

    n, p, m = model.n, model.p, model.m
    theta = np.zeros((n, p))
    Vtheta = np.zeros((n, p))
    mu = np.zeros((n, p))
    Vmu = np.zeros((n, p))
    alpha = np.zeros((n, m))
    Valpha = np.zeros((n, m, m))
    Ey_var = np.zeros((n, p))
    streams = seed_sequence(seed).spawn(n) if nsim > 0 else [None] * n

    warm = None
    for t in range(n):
        y = model.y.copy()
        y[t:] = np.nan
        truncated = model.replace(y=y)
        approx = approximate(truncated, theta=warm)
        warm = approx.thetahat
        if nsim > 0 and not truncated.gaussian:
            sample = importance_sample(
                truncated, "states", nsim, streams[t], antithetics, approx=approx
            )
            w = sample.weights()
            states = sample.draws[:, t, :]
            alpha[t] = w @ states
            dev = states - alpha[t]
            Valpha[t] = (w[:, None] * dev).T @ dev
            signals = states @ model.Z_at(t).T
            theta[t] = w @ signals
            Vtheta[t] = w @ (signals - theta[t]) ** 2
            for i, dist in enumerate(model.distribution):
                means = inverse_link(dist, signals[:, i], model.u[t, i])
                mu[t, i] = w @ means
                Vmu[t, i] = w @ (means - mu[t, i]) ** 2
                var_u = np.diag(model.H_at(t))[i] if dist == "gaussian" else model.u[t, i]
                Ey_var[t, i] = w @ variance_function(dist, signals[:, i], var_u)
        else:
            sm = approx.smooth
            alpha[t] = sm.alphahat[t]
            Valpha[t] = sm.V[t]
            theta[t] = sm.thetahat[t]
            Vtheta[t] = np.diag(sm.Vtheta[t])
            for i, dist in enumerate(model.distribution):
                mu[t, i] = inverse_link(dist, theta[t, i], model.u[t, i])
                slope = _mean_derivative(dist, theta[t, i], model.u[t, i])
                Vmu[t, i] = slope**2 * Vtheta[t, i]
                var_u = np.diag(model.H_at(t))[i] if dist == "gaussian" else model.u[t, i]
                Ey_var[t, i] = variance_function(dist, theta[t, i], var_u)
    logger.debug(f"Non-gaussian filtering finished for {n} time points")
    return NonGaussianFilterResult(
        theta=theta,
        Vtheta=Vtheta,
        mu=mu,
        Vmu=Vmu,
        alpha=alpha,
        Valpha=Valpha,
        Ey_var=Ey_var,
    )


def _mean_derivative(dist: str, theta: float, u: float) -> float:
    if dist == "gaussian":
        return 1.0
    if dist == "binomial":
        pi = inverse_link(dist, theta, 1.0)
        return float(u * pi * (1 - pi))
    return float(inverse_link(dist, theta, u))
