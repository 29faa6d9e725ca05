"""
Maximum likelihood fitting, prediction, residual diagnostics and signals
Wraps the filter, smoother, approximation and simulation layers into the
calls used by the command line
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize
from scipy.stats import norm

from .approx import ApproximationResult, _mean_derivative, approximate, filter_nongaussian
from .builders import AssembledModel
from .distributions import inverse_link
from .errors import (
    DiffusePhaseError,
    NumericError,
    SSMError,
    UsageError,
)
from .filtering import STEP_REGULAR, F_FLOOR, FilterResult, kalman_filter, reconstruct_multivariate
from .likelihood import LogLik, loglik_gaussian, loglik_nongaussian
from .model import StateSpaceModel, check, extend, with_proper_prior
from .simulation import Forecast, importance_sample, predict_intervals_nongaussian
from .smoothing import SmoothResult, signal_moments, smooth_states

OPTIMIZERS = ("Nelder-Mead", "BFGS")
RESIDUAL_KINDS = ("recursive", "marginal", "cholesky", "quadratic", "auxiliary")

logger = logging.getLogger("Inference")


# Smoothing summary


@dataclass(frozen=True, eq=False)
class KFSResult:
    """
    Filtered and smoothed output of a model

    For non-gaussian models ``filter``/``smooth`` belong to the approximating
    model and ``theta``/``mu`` moments come from importance sampling when
    nsim > 0. Variances are elementwise (n x p).
    """

    model: StateSpaceModel
    filter: FilterResult
    smooth: SmoothResult
    loglik: LogLik
    alphahat: np.ndarray
    V: np.ndarray
    theta: np.ndarray
    Vtheta: np.ndarray
    mu: np.ndarray
    Vmu: np.ndarray
    approx: Optional[ApproximationResult] = None
    nsim: int = 0


def kfs(
    model: StateSpaceModel,
    nsim: int = 0,
    seed=None,
    antithetics: bool = True,
    threads: int = 1,
) -> KFSResult:
    """
    Filter, smooth and evaluate the log-likelihood in one call

    Args:
        model: State space model
        nsim: Importance draws for non-gaussian models (0 uses the mode)
        seed: Seed for the importance sample and likelihood
        antithetics: Use antithetic draws
        threads: Worker threads for simulation

    Returns:
        KFSResult
    """
    if model.gaussian:
        fr = kalman_filter(model)
        sm = smooth_states(fr, model)
        theta = sm.thetahat
        Vtheta = np.einsum("tii->ti", sm.Vtheta).copy()
        return KFSResult(
            model=model,
            filter=fr,
            smooth=sm,
            loglik=loglik_gaussian(fr),
            alphahat=sm.alphahat,
            V=sm.V,
            theta=theta,
            Vtheta=Vtheta,
            mu=theta,
            Vmu=Vtheta,
        )

    approx = approximate(model)
    loglik = loglik_nongaussian(model, nsim, seed, antithetics, approx=approx)
    sm = approx.smooth
    if nsim > 0:
        sample = importance_sample(
            model, "states", nsim, seed, antithetics, approx=approx, threads=threads
        )
        w = sample.weights()
        alphahat = sample.mean()
        dev = sample.draws - alphahat
        V = np.einsum("i,itm,itk->tmk", w, dev, dev)
        signals = np.einsum("tpm,itm->itp", _Z_stack(model), sample.draws)
        theta = np.tensordot(w, signals, axes=1)
        Vtheta = np.tensordot(w, (signals - theta) ** 2, axes=1)
        means = np.stack(
            [
                inverse_link(dist, signals[:, :, i], model.u[:, i])
                for i, dist in enumerate(model.distribution)
            ],
            axis=2,
        )
        mu = np.tensordot(w, means, axes=1)
        Vmu = np.tensordot(w, (means - mu) ** 2, axes=1)
    else:
        alphahat, V = sm.alphahat, sm.V
        theta = sm.thetahat
        Vtheta = np.einsum("tii->ti", sm.Vtheta).copy()
        mu = np.zeros_like(theta)
        Vmu = np.zeros_like(theta)
        for i, dist in enumerate(model.distribution):
            mu[:, i] = inverse_link(dist, theta[:, i], model.u[:, i])
            slope = np.array(
                [_mean_derivative(dist, theta[t, i], model.u[t, i]) for t in range(model.n)]
            )
            Vmu[:, i] = slope**2 * Vtheta[:, i]
    return KFSResult(
        model=model,
        filter=approx.filter,
        smooth=sm,
        loglik=loglik,
        alphahat=alphahat,
        V=V,
        theta=theta,
        Vtheta=Vtheta,
        mu=mu,
        Vmu=Vmu,
        approx=approx,
        nsim=nsim,
    )


def _Z_stack(model: StateSpaceModel) -> np.ndarray:
    Z = model.Z
    if Z.shape[2] == 1:
        return np.broadcast_to(Z[:, :, 0], (model.n, model.p, model.m))
    return np.moveaxis(Z[:, :, : model.n], 2, 0)


def fitted(result: KFSResult) -> np.ndarray:
    """Smoothed means of the observations, E(y_t | y)"""
    return result.mu


@dataclass(frozen=True)
class Coefficients:
    """One-step-ahead state estimates a_{n+1} with standard errors"""

    names: Tuple[str, ...]
    estimate: np.ndarray
    se: np.ndarray


def coefficients(result: KFSResult) -> Coefficients:
    """
    State estimates at time n + 1

    For time invariant states (regression coefficients) these are the
    estimates given all data.
    """
    model = result.model
    n = model.n
    if result.approx is None or result.nsim == 0:
        mean, cov = result.filter.a[n], result.filter.P[n]
    else:
        Tn = model.T_at(n - 1)
        mean = Tn @ result.alphahat[n - 1]
        cov = Tn @ result.V[n - 1] @ Tn.T + model.RQR_at(n - 1)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return Coefficients(names=model.state_names, estimate=mean.copy(), se=se)


# Fitting


@dataclass(frozen=True, eq=False)
class FitResult:
    """Estimated parameters, the fitted model and the optimizer trace"""

    parameters: np.ndarray
    model: Optional[StateSpaceModel]
    loglik: LogLik
    initial_loglik: float
    converged: bool
    evaluations: int
    message: str
    parameter_names: Tuple[str, ...] = ()
    natural: Optional[Dict[str, float]] = None
    final_state: Optional[np.ndarray] = None
    final_state_se: Optional[np.ndarray] = None


class _Objective:
    """Negative log-likelihood of update_fn(x) with common random numbers"""

    def __init__(self, update_fn, nsim: int, seed, antithetics: bool):
        self.update_fn = update_fn
        self.nsim = nsim
        self.seed = seed
        self.antithetics = antithetics
        self.evaluations = 0
        self._warm: Optional[np.ndarray] = None

    def loglik(self, x: np.ndarray) -> LogLik:
        model = check(self.update_fn(np.asarray(x, dtype=float)))
        if model.gaussian:
            return loglik_gaussian(kalman_filter(model))
        approx = approximate(model, theta=self._warm)
        if approx.converged:
            self._warm = approx.thetahat
        return loglik_nongaussian(model, self.nsim, self.seed, self.antithetics, approx=approx)

    def __call__(self, x: np.ndarray) -> float:
        self.evaluations += 1
        try:
            value = self.loglik(x).value
        except (SSMError, np.linalg.LinAlgError, FloatingPointError) as e:
            logger.debug(f"Objective infinite at {np.round(x, 6).tolist()}: {e}")
            return np.inf
        return -value if np.isfinite(value) else np.inf


def _warn_diffuse_parameters(update_fn, x0: np.ndarray):
    """Warn when parameters change Z or T columns of diffuse states"""
    if x0.size == 0:
        return
    try:
        base = update_fn(x0)
        moved = update_fn(x0 + 0.05)
    except SSMError:
        return
    diffuse = base.diffuse_states
    if not diffuse.any():
        return
    for name in ("Z", "T"):
        a, b = getattr(base, name), getattr(moved, name)
        if a.shape == b.shape and not np.allclose(a[:, diffuse, :], b[:, diffuse, :]):
            logger.warning(
                f"Estimated parameters enter {name} columns of diffuse states; "
                "the diffuse likelihood omits the correction term for them"
            )
            return


def _minimize(objective: _Objective, x0: np.ndarray, method: str, maxiter: Optional[int]):
    options = {} if maxiter is None else {"maxiter": int(maxiter)}
    if method == "Nelder-Mead":
        options.update({"xatol": 1e-6, "fatol": 1e-8})
    return minimize(objective, x0, method=method, options=options)


def _fit_from(
    objective: _Objective, x0: np.ndarray, method: str, maxiter: Optional[int]
) -> Tuple[np.ndarray, float, bool, str]:
    start_value = objective(x0)
    if x0.size == 0:
        return x0, start_value, bool(np.isfinite(start_value)), "no parameters to estimate"
    res = _minimize(objective, x0, method, maxiter)
    x, value = np.asarray(res.x, dtype=float), float(res.fun)
    converged = bool(res.success) and bool(np.isfinite(value))
    message = str(res.message)
    if not value <= start_value:
        x, value = x0, start_value
        converged = False
        message = f"no improvement over the initial values ({message})"
    return x, value, converged, message


def fit(
    target: Union[AssembledModel, StateSpaceModel],
    inits: Optional[Sequence[float]] = None,
    update_fn: Optional[Callable[[np.ndarray], StateSpaceModel]] = None,
    method: str = "Nelder-Mead",
    nsim: int = 0,
    seed=None,
    antithetics: bool = True,
    maxiter: Optional[int] = None,
    starts: Optional[Sequence[Sequence[float]]] = None,
    threads: int = 1,
    two_stage: bool = False,
) -> FitResult:
    """
    Maximize the (diffuse or importance sampling) log-likelihood

    Args:
        target: Assembled model (its update is the default update_fn) or a
            plain model together with update_fn
        inits: Initial parameter vector
        update_fn: Maps a parameter vector to a model
        method: "Nelder-Mead" or "BFGS" (finite difference gradients)
        nsim: Importance draws for non-gaussian models
        seed: Seed reused at every evaluation so the objective is smooth
        antithetics: Use antithetic draws
        maxiter: Optimizer iteration limit
        starts: Additional initial vectors; the best result wins
        threads: Run starts concurrently
        two_stage: Fit with nsim = 0 first and refine with nsim draws

    Returns:
        FitResult; a failing optimization yields converged=False
    """
    if method not in OPTIMIZERS:
        raise UsageError(f"unknown optimizer '{method}', expected one of {OPTIMIZERS}")
    assembled = target if isinstance(target, AssembledModel) else None
    if update_fn is None:
        if assembled is None:
            raise UsageError("update_fn is required when fitting a plain model")
        update_fn = assembled.update
    if inits is None:
        if assembled is None:
            raise UsageError("inits are required when fitting a plain model")
        inits = assembled.initial_parameters()
    x0 = np.asarray(inits, dtype=float).reshape(-1)
    if nsim > 0 and seed is None:
        seed = int(np.random.SeedSequence().entropy % 2**32)
        logger.info(f"No seed given; using {seed} for the importance draws")

    _warn_diffuse_parameters(update_fn, x0)
    candidates = [x0] + [np.asarray(s, dtype=float).reshape(-1) for s in (starts or [])]
    for c in candidates:
        if c.size != x0.size:
            raise UsageError(f"start vector has {c.size} values, expected {x0.size}")

    initial = -_Objective(update_fn, nsim, seed, antithetics)(x0)

    def run(start: np.ndarray):
        evaluations = 0
        if two_stage and nsim > 0:
            first = _Objective(update_fn, 0, seed, antithetics)
            start, _, _, _ = _fit_from(first, start, method, maxiter)
            evaluations += first.evaluations
            logger.info(f"First stage finished after {first.evaluations} evaluations")
        objective = _Objective(update_fn, nsim, seed, antithetics)
        x, value, converged, message = _fit_from(objective, start, method, maxiter)
        return x, value, converged, message, evaluations + objective.evaluations

    if threads > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, candidates))
    else:
        results = [run(c) for c in candidates]

    best = min(results, key=lambda r: r[1])
    x, value, converged, message, _ = best
    evaluations = sum(r[4] for r in results)
    if len(results) > 1:
        logger.info(
            f"Best of {len(results)} starts: "
            + ", ".join(f"{-r[1]:.4f}" for r in results)
        )
    if not np.isfinite(value):
        logger.warning("Log-likelihood is not finite at any start; fit failed")
        converged = False
    elif not converged:
        logger.warning(f"Optimizer did not converge: {message}")

    model = None
    final = _Objective(update_fn, nsim, seed, antithetics)
    try:
        model = check(update_fn(x))
        loglik = final.loglik(x)
    except SSMError as e:
        logger.warning(f"Log-likelihood at the estimate failed: {e}")
        loglik = LogLik(value=-np.inf, method="failed", nsim=nsim)
        converged = False

    final_state = final_se = None
    if model is not None:
        try:
            coef = coefficients(kfs(model, nsim, seed, antithetics))
            final_state, final_se = coef.estimate, coef.se
        except SSMError as e:
            logger.warning(f"State estimates at the optimum failed: {e}")

    logger.info(
        f"Fit finished: logLik={loglik.value:.6f} after {evaluations} evaluations "
        f"({'converged' if converged else 'not converged'})"
    )
    return FitResult(
        parameters=x,
        model=model,
        loglik=loglik,
        initial_loglik=initial,
        converged=converged,
        evaluations=evaluations,
        message=message,
        parameter_names=tuple(assembled.parameter_names) if assembled else (),
        natural=assembled.natural_parameters(x) if assembled else None,
        final_state=final_state,
        final_state_se=final_se,
    )


# Prediction


def predict(
    model: StateSpaceModel,
    horizon: int = 0,
    newdata: Optional[Mapping[str, np.ndarray]] = None,
    interval: str = "confidence",
    level: float = 0.95,
    nsim: int = 0,
    seed=None,
    type: str = "response",
    antithetics: bool = True,
    threads: int = 1,
) -> Forecast:
    """
    Point predictions with confidence or prediction intervals

    Args:
        model: Model with estimated parameters
        horizon: Future time points (0 gives fitted values for 1..n)
        newdata: Future Z, H, T, R, Q and u (see model.extend)
        interval: "confidence" (signal or mean) or "prediction" (observation)
        level: Coverage of the intervals
        nsim: Importance draws for non-gaussian models
        seed: Seed for the draws
        type: "response" or "link" (non-gaussian only)

    Returns:
        Forecast over the horizon (or all fitted times)
    """
    if interval not in ("confidence", "prediction"):
        raise UsageError(f"unknown interval '{interval}'")
    if type not in ("response", "link"):
        raise UsageError(f"unknown type '{type}'")
    if not 0 < level < 1:
        raise UsageError(f"level must lie in (0, 1), got {level}")
    n = model.n
    full = extend(model, horizon, newdata) if horizon > 0 else model
    check(full)
    times = np.arange(n, n + horizon) if horizon > 0 else np.arange(n)

    if not full.gaussian:
        if nsim > 0:
            return predict_intervals_nongaussian(
                full, level, nsim, seed, interval, type, times, antithetics, threads
            )
        if interval == "prediction":
            raise UsageError("prediction intervals of non-gaussian series need nsim > 0")
        return _predict_mode(full, times, level, type)

    fr = kalman_filter(full)
    sm = smooth_states(fr, full)
    z = norm.ppf((1 + level) / 2)
    mean = sm.thetahat[times]
    var = np.einsum("tii->ti", sm.Vtheta[times]).copy()
    if interval == "prediction":
        var += np.stack([np.diag(full.H_at(t)) for t in times])
    sd = np.sqrt(np.clip(var, 0.0, None))
    return Forecast(
        times=times,
        mean=mean,
        lower=mean - z * sd,
        upper=mean + z * sd,
        interval=interval,
        level=level,
        series_names=full.series_names,
    )


def _predict_mode(full: StateSpaceModel, times: np.ndarray, level: float, type: str) -> Forecast:
    """Confidence intervals from the approximating model, mapped by the link"""
    sm = approximate(full).smooth
    z = norm.ppf((1 + level) / 2)
    theta = sm.thetahat[times]
    sd = np.sqrt(np.clip(np.einsum("tii->ti", sm.Vtheta[times]), 0.0, None))
    lower, upper, mean = theta - z * sd, theta + z * sd, theta.copy()
    if type == "response":
        for i, dist in enumerate(full.distribution):
            u = full.u[times, i]
            mean[:, i] = inverse_link(dist, theta[:, i], u)
            lower[:, i] = inverse_link(dist, lower[:, i], u)
            upper[:, i] = inverse_link(dist, upper[:, i], u)
    return Forecast(
        times=times,
        mean=mean,
        lower=lower,
        upper=upper,
        interval="confidence",
        level=level,
        series_names=full.series_names,
    )


# Residuals


@dataclass(frozen=True)
class ResidualSet:
    """
    Standardized residuals; NaN marks missing cells and the diffuse phase

    Kinds that are not available for a model are None.
    """

    recursive: np.ndarray
    marginal: Optional[np.ndarray] = None
    cholesky: Optional[np.ndarray] = None
    quadratic: Optional[np.ndarray] = None
    auxiliary_eps: Optional[np.ndarray] = None
    auxiliary_eta: Optional[np.ndarray] = None
    d: int = 0

    def get(self, kind: str) -> np.ndarray:
        if kind not in RESIDUAL_KINDS:
            raise UsageError(f"unknown residual kind '{kind}', expected one of {RESIDUAL_KINDS}")
        if kind == "auxiliary":
            if self.auxiliary_eps is None:
                raise UsageError("auxiliary residuals are not available for this model")
            return np.hstack([self.auxiliary_eps, self.auxiliary_eta])
        value = getattr(self, kind)
        if value is None:
            raise UsageError(f"{kind} residuals are not available for this model")
        return value if value.ndim == 2 else value[:, None]


def _proper(model: StateSpaceModel) -> StateSpaceModel:
    scale = np.nanvar(model.y) if np.any(~np.isnan(model.y)) else 1.0
    variance = 1e4 * max(float(scale), 1.0)
    return with_proper_prior(model, np.flatnonzero(model.diffuse_states), variance)


def residuals(
    model: StateSpaceModel,
    nsim: int = 0,
    seed=None,
    proper_prior: bool = False,
    antithetics: bool = True,
) -> ResidualSet:
    """
    Recursive, marginal, Cholesky, quadratic and auxiliary residuals

    Args:
        model: Model with estimated parameters
        nsim: Importance draws (required for non-gaussian recursive residuals)
        seed: Seed for the draws
        proper_prior: Replace diffuse priors by a proper non-informative one
            so that residuals exist from the first time point

    Returns:
        ResidualSet with NaN for diffuse steps; only recursive residuals
        cover series resolved within the last diffuse time point
    """
    if proper_prior:
        model = _proper(model)
    if not model.gaussian:
        return _recursive_nongaussian(model, nsim, seed, antithetics)

    n, p = model.n, model.p
    fr = kalman_filter(model)
    sm = smooth_states(fr, model)
    d = fr.d

    recursive = np.full((n, p), np.nan)
    ok = (fr.steps == STEP_REGULAR) & (fr.F > F_FLOOR)
    recursive[ok] = fr.v[ok] / np.sqrt(fr.F[ok])

    marginal = np.full((n, p), np.nan)
    chol = np.full((n, p), np.nan)
    quadratic = np.full(n, np.nan)
    for t in range(d, n):
        try:
            step = reconstruct_multivariate(fr, model, t)
        except DiffusePhaseError:
            continue
        idx = step.observed
        if idx.size == 0:
            continue
        marginal[t, idx] = step.v / np.sqrt(np.diag(step.F))
        try:
            L = np.linalg.cholesky(step.F)
        except np.linalg.LinAlgError as e:
            raise NumericError(f"prediction error covariance is not positive definite: {e}", (t, 0)) from e
        chol[t, idx] = solve_triangular(L, step.v, lower=True)
        quadratic[t] = float(np.sum(chol[t, idx] ** 2))

    h = np.stack([np.diag(model.H_at(t)) for t in range(n)])
    with np.errstate(divide="ignore", invalid="ignore"):
        aux_eps = sm.epshat / np.sqrt(h - sm.Veps)
        q = np.stack([np.diag(model.Q_at(t)) for t in range(n)]) if model.k else np.zeros((n, 0))
        aux_eta = sm.etahat / np.sqrt(q - np.einsum("tii->ti", sm.Veta))
    aux_eps[~fr.view.observed] = np.nan
    aux_eps[~np.isfinite(aux_eps)] = np.nan
    aux_eta[~np.isfinite(aux_eta)] = np.nan

    if d > 0:
        logger.debug(f"Residuals start after the diffuse phase at t={d}")
    return ResidualSet(
        recursive=recursive,
        marginal=marginal,
        cholesky=chol,
        quadratic=quadratic,
        auxiliary_eps=aux_eps,
        auxiliary_eta=aux_eta,
        d=d,
    )


def _recursive_nongaussian(model: StateSpaceModel, nsim: int, seed, antithetics: bool) -> ResidualSet:
    if nsim <= 0:
        raise UsageError("recursive residuals of non-gaussian series need --nsim > 0")
    diffuse = approximate(model).filter
    steps, d = diffuse.steps, diffuse.d
    nf = filter_nongaussian(model, nsim, seed, antithetics)
    with np.errstate(divide="ignore", invalid="ignore"):
        res = (model.y - nf.mu) / np.sqrt(nf.Vmu + nf.Ey_var)
    res[:d][steps[:d] != STEP_REGULAR] = np.nan
    res[~np.isfinite(res)] = np.nan
    return ResidualSet(recursive=res, d=d)


def autocorrelations(residuals: np.ndarray, max_lag: int = 10) -> np.ndarray:
    """
    Auto- and cross-correlations with pairwise complete observations

    Returns:
        Array c with c[l, i, j] = corr(x_i[t + l], x_j[t]) for l = 0..max_lag
    """
    x = np.asarray(residuals, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, p = x.shape
    out = np.full((max_lag + 1, p, p), np.nan)
    for lag in range(min(max_lag, n - 1) + 1):
        for i in range(p):
            for j in range(p):
                a, b = x[lag:, i], x[: n - lag, j]
                ok = ~(np.isnan(a) | np.isnan(b))
                if ok.sum() < 3:
                    continue
                a, b = a[ok], b[ok]
                if a.std() == 0 or b.std() == 0:
                    continue
                out[lag, i, j] = np.corrcoef(a, b)[0, 1]
    return out


# Signals


def signal(
    assembled: AssembledModel,
    sm: SmoothResult,
    components: Optional[Sequence[str]] = None,
    model: Optional[StateSpaceModel] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Smoothed signal of a subset of components

    Args:
        assembled: Model layout
        sm: Smoother output of ``model``
        components: Component names (default all states)
        model: Model the smoother ran on (default the assembled model)

    Returns:
        (mean n x p, covariance n x p x p)
    """
    model = assembled.model if model is None else model
    if components is None:
        columns = np.arange(model.m)
    else:
        columns = np.concatenate(
            [np.arange(model.m)[assembled.states(name)] for name in components] or [np.zeros(0, int)]
        ).astype(int)
    return signal_moments(model, sm, columns)

