"""
Simulation smoothing, importance sampling and simulated prediction intervals
Every base replicate draws its standard normals from its own child seed
sequence, so draws do not depend on how replicates are split over threads
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import chi2

from .approx import ApproximationResult, approximate, log_pseudo_density
from .distributions import density_eval, draw, inverse_link
from .errors import ApproxError, UsageError
from .filtering import FilterResult, batch_filter, kalman_filter
from .model import StateSpaceModel, missing_pattern
from .smoothing import SmoothResult, _Z_series, batch_smoother, smooth_states

TARGETS = ("states", "signals", "disturbances", "observations")

logger = logging.getLogger("Simulation")


def seed_sequence(seed=None) -> np.random.SeedSequence:
    """Turn an int, SeedSequence, Generator or None into a SeedSequence"""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, np.random.Generator):
        return np.random.SeedSequence(int(seed.integers(0, 2**63)))
    return np.random.SeedSequence(seed)


@dataclass(frozen=True, eq=False)
class ImportanceSample:
    """
    Simulated draws with log importance weights

    With antithetics the draws come in blocks of four (base, location flip,
    scale flip, location and scale flip). Gaussian models have zero log
    weights.
    """

    draws: np.ndarray
    logweights: np.ndarray
    what: str
    antithetics: bool
    seed: Optional[int]

    @property
    def nsim(self) -> int:
        return self.draws.shape[0]

    def weights(self) -> np.ndarray:
        """Normalized weights"""
        w = np.exp(self.logweights - self.logweights.max())
        return w / w.sum()

    def mean(self) -> np.ndarray:
        """Weighted mean over draws"""
        return np.tensordot(self.weights(), self.draws, axes=1)

    def variance(self) -> np.ndarray:
        """Weighted elementwise variance over draws"""
        mean = self.mean()
        return np.tensordot(self.weights(), (self.draws - mean) ** 2, axes=1)

    def ess(self) -> float:
        """Effective sample size 1 / sum w^2"""
        w = self.weights()
        return float(1.0 / np.sum(w**2))


def _sqrt_psd(S: np.ndarray) -> np.ndarray:
    """B with B B' = S for a symmetric positive semidefinite S"""
    if S.size == 0:
        return S.copy()
    vals, vecs = np.linalg.eigh((S + S.T) / 2)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


class _Roots:
    """Square roots of H_t, Q_t and P1, computed once per distinct slice"""

    def __init__(self, model: StateSpaceModel):
        self.model = model
        self.P1 = _sqrt_psd(model.P1)
        self._H = [_sqrt_psd(model.H[:, :, s]) for s in range(model.H.shape[2])]
        self._Q = [_sqrt_psd(model.Q[:, :, s]) for s in range(model.Q.shape[2])]

    def H(self, t: int) -> np.ndarray:
        return self._H[min(t, len(self._H) - 1)]

    def Q(self, t: int) -> np.ndarray:
        return self._Q[min(t, len(self._Q) - 1)]


def _normals(streams: Sequence[np.random.SeedSequence], size: int) -> np.ndarray:
    if not streams:
        return np.zeros((0, size))
    return np.stack([np.random.default_rng(s).standard_normal(size) for s in streams])


def _unconditional(
    model: StateSpaceModel, roots: _Roots, U: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Draw (alpha, eps, eta, y) from the model with diffuse states fixed at a1

    U holds the standard normals for alpha_1, then eta, then eps.
    Returns alpha with n + 1 time points.
    """
    n, p, m, k = model.n, model.p, model.m, model.k
    nsim = U.shape[0]
    u_a = U[:, :m]
    u_eta = U[:, m : m + n * k].reshape(nsim, n, k)
    u_eps = U[:, m + n * k :].reshape(nsim, n, p)
    alpha = np.zeros((nsim, n + 1, m))
    eps = np.zeros((nsim, n, p))
    eta = np.zeros((nsim, n, k))
    y = np.zeros((nsim, n, p))
    alpha[:, 0] = model.a1 + u_a @ roots.P1.T
    for t in range(n):
        eps[:, t] = u_eps[:, t] @ roots.H(t).T
        eta[:, t] = u_eta[:, t] @ roots.Q(t).T
        y[:, t] = alpha[:, t] @ model.Z_at(t).T + eps[:, t]
        alpha[:, t + 1] = alpha[:, t] @ model.T_at(t).T + eta[:, t] @ model.R_at(t).T
    return alpha, eps, eta, y


def _draw_dimension(model: StateSpaceModel) -> int:
    return model.m + model.n * (model.k + model.p)


def _conditional_chunk(
    fr: FilterResult, roots: _Roots, streams: Sequence[np.random.SeedSequence]
):
    model = fr.model
    U = _normals(streams, _draw_dimension(model))
    alpha, eps, eta, y = _unconditional(model, roots, U)
    y[:, ~fr.view.observed] = np.nan
    alpha_s, eps_s, eta_s = batch_smoother(fr, y)
    c = np.sum(U**2, axis=1)
    return alpha[:, : model.n] - alpha_s, eps - eps_s, eta - eta_s, c


def _run_chunks(func, streams: List, threads: int, *args):
    if threads <= 1 or len(streams) < 2:
        return [func(*args, streams)]
    size = -(-len(streams) // threads)
    chunks = [streams[i : i + size] for i in range(0, len(streams), size)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda ch: func(*args, ch), chunks))


def _expand_antithetic(
    mean: np.ndarray, dev: np.ndarray, scale: Optional[np.ndarray]
) -> np.ndarray:
    """Blocks of four: mean + dev, mean - dev, mean + s dev, mean - s dev"""
    if scale is None:
        return mean + dev
    s = scale.reshape((-1,) + (1,) * (dev.ndim - 1))
    out = np.stack([mean + dev, mean - dev, mean + s * dev, mean - s * dev], axis=1)
    return out.reshape((-1,) + dev.shape[1:])


def _conditional_draws(
    model: StateSpaceModel,
    what: str,
    nsim: int,
    seed,
    antithetics: bool,
    threads: int = 1,
    fr: Optional[FilterResult] = None,
    sm: Optional[SmoothResult] = None,
) -> np.ndarray:
    if what not in TARGETS:
        raise UsageError(f"unknown simulation target '{what}', expected one of {TARGETS}")
    if nsim <= 0:
        raise UsageError("nsim must be positive")
    fr = kalman_filter(model) if fr is None else fr
    sm = smooth_states(fr, model) if sm is None else sm
    roots = _Roots(model)
    streams = seed_sequence(seed).spawn(nsim)
    parts = _run_chunks(_conditional_chunk, streams, threads, fr, roots)
    dev_alpha = np.concatenate([p[0] for p in parts])
    dev_eps = np.concatenate([p[1] for p in parts])
    dev_eta = np.concatenate([p[2] for p in parts])
    c = np.concatenate([p[3] for p in parts])

    scale = None
    if antithetics:
        df = _draw_dimension(model)
        scale = np.sqrt(chi2.isf(chi2.cdf(c, df), df) / c)

    if what in ("states", "signals"):
        alpha = _expand_antithetic(sm.alphahat, dev_alpha, scale)
        if what == "states":
            return alpha
        return np.einsum("tpm,itm->itp", _Z_series(model), alpha)
    eps = _expand_antithetic(sm.epshat, dev_eps, scale)
    if what == "disturbances":
        eta = _expand_antithetic(sm.etahat, dev_eta, scale)
        return np.concatenate([eps, eta], axis=2)
    alpha = _expand_antithetic(sm.alphahat, dev_alpha, scale)
    return np.einsum("tpm,itm->itp", _Z_series(model), alpha) + eps


def _seed_label(seed) -> Optional[int]:
    return int(seed) if isinstance(seed, (int, np.integer)) else None


def simulate_conditional(
    model: StateSpaceModel,
    what: str = "states",
    nsim: int = 1,
    seed=None,
    antithetics: bool = False,
    threads: int = 1,
) -> ImportanceSample:
    """
    Draw from p(target | y) for a gaussian model

    Unconditional draws are smoothed with the model's own gains and the
    smoothing error is added to the smoothed mean.

    Args:
        model: Gaussian model
        what: states, signals, disturbances (eps then eta) or observations
        nsim: Number of independent draws (four times as many with antithetics)
        seed: Seed for the per-replicate streams
        antithetics: Add location and scale antithetic draws
        threads: Worker threads

    Returns:
        ImportanceSample with zero log weights
    """
    draws = _conditional_draws(model, what, nsim, seed, antithetics, threads)
    logger.debug(f"Simulated {draws.shape[0]} conditional {what} draws")
    return ImportanceSample(
        draws=draws,
        logweights=np.zeros(draws.shape[0]),
        what=what,
        antithetics=antithetics,
        seed=_seed_label(seed),
    )


def _predictive_chunk(fr: FilterResult, roots: _Roots, streams):
    model = fr.model
    U = _normals(streams, _draw_dimension(model))
    alpha, _, _, y = _unconditional(model, roots, U)
    y[:, ~fr.view.observed] = np.nan
    a, _ = batch_filter(fr, y)
    return alpha - a


def simulate_predictive(
    model: StateSpaceModel, nsim: int = 1, seed=None, threads: int = 1
) -> ImportanceSample:
    """
    Draw alpha_t | y_1..y_{t-1} for t = 1..n+1 jointly within each replicate

    Inside the diffuse phase only the proper part of the prediction
    variance is represented.
    """
    if nsim <= 0:
        raise UsageError("nsim must be positive")
    fr = kalman_filter(model)
    roots = _Roots(model)
    streams = seed_sequence(seed).spawn(nsim)
    parts = _run_chunks(_predictive_chunk, streams, threads, fr, roots)
    draws = fr.a + np.concatenate(parts)
    return ImportanceSample(
        draws=draws,
        logweights=np.zeros(nsim),
        what="states",
        antithetics=False,
        seed=_seed_label(seed),
    )


def importance_sample(
    model: StateSpaceModel,
    what: str = "signals",
    nsim: int = 1000,
    seed=None,
    antithetics: bool = True,
    approx: Optional[ApproximationResult] = None,
    threads: int = 1,
) -> ImportanceSample:
    """
    Draw states or signals from the approximating model with importance weights

    Log weights are stabilized by their value at the mode:
    log w* = [log p(y|theta) - log p(y|theta_hat)] - [log g(y|theta) - log g(y|theta_hat)]
    """
    if what not in ("states", "signals"):
        raise UsageError("importance sampling supports states or signals")
    if approx is None:
        approx = approximate(model)
    if not approx.converged:
        raise ApproxError("importance sampling needs a converged approximation")
    states = _conditional_draws(
        approx.model, "states", nsim, seed, antithetics, threads, approx.filter, approx.smooth
    )
    signals = np.einsum("tpm,itm->itp", _Z_series(model), states)

    logw = np.zeros(states.shape[0])
    observed = missing_pattern(model)
    for i in np.flatnonzero(model.nongaussian_series):
        cells = observed[:, i]
        if not cells.any():
            continue
        dist = model.distribution[i]
        y, u = model.y[cells, i], model.u[cells, i]
        yt, ht = approx.ytilde[cells, i], approx.Htilde[cells, i]
        theta = signals[:, cells, i]
        logp = density_eval(dist, y, u, theta).logp - density_eval(
            dist, y, u, approx.thetahat[cells, i]
        ).logp
        logg = log_pseudo_density(yt, ht, theta) - log_pseudo_density(
            yt, ht, approx.thetahat[cells, i]
        )
        logw += np.sum(logp - logg, axis=1)

    sample = ImportanceSample(
        draws=states if what == "states" else signals,
        logweights=logw,
        what=what,
        antithetics=antithetics,
        seed=_seed_label(seed),
    )
    if not model.gaussian:
        ess = sample.ess()
        if ess < 0.1 * sample.nsim:
            logger.warning(
                f"Low effective sample size {ess:.1f} of {sample.nsim} importance draws"
            )
        else:
            logger.debug(f"Effective sample size {ess:.1f} of {sample.nsim}")
    return sample


@dataclass(frozen=True)
class Forecast:
    """Point predictions and interval bounds at selected time points"""

    times: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    interval: str
    level: float
    series_names: Tuple[str, ...]


def predict_intervals_nongaussian(
    model: StateSpaceModel,
    level: float = 0.95,
    nsim: int = 1000,
    seed=None,
    interval: str = "prediction",
    type: str = "response",
    times: Optional[Sequence[int]] = None,
    antithetics: bool = True,
    threads: int = 1,
) -> Forecast:
    """
    Simulated intervals: weighted signal draws are resampled by their
    weights, observations are drawn from p(y | theta) for prediction
    intervals, and bounds are empirical quantiles

    Args:
        model: Model, typically extended with future time points
        level: Interval coverage
        nsim: Independent importance draws
        seed: Seed for draws and resampling
        interval: "prediction" or "confidence"
        type: "response" (mean scale) or "link" (signal scale, confidence only)
        times: Time indices to report (default all)
    """
    if interval not in ("prediction", "confidence"):
        raise UsageError(f"unknown interval '{interval}'")
    if type not in ("response", "link"):
        raise UsageError(f"unknown type '{type}'")
    root = seed_sequence(seed)
    sample_seq, resample_seq = root.spawn(2)
    sample = importance_sample(
        model, "signals", nsim, sample_seq, antithetics, threads=threads
    )
    total = sample.nsim
    if level < 1 and total < 100 / (1 - level):
        logger.warning(
            f"{total} draws are few for {level:.0%} intervals; "
            f"use at least {int(np.ceil(100 / (1 - level)))}"
        )
    times = np.arange(model.n) if times is None else np.asarray(times, dtype=int)
    rng = np.random.default_rng(resample_seq)
    w = sample.weights()
    theta = sample.draws[:, times, :]
    picked = theta[rng.choice(total, size=total, replace=True, p=w)]

    mean = np.zeros((times.size, model.p))
    lower = np.zeros_like(mean)
    upper = np.zeros_like(mean)
    probs = [(1 - level) / 2, (1 + level) / 2]
    for i, dist in enumerate(model.distribution):
        u = model.u[times, i]
        if dist == "gaussian":
            u = np.array([model.H_at(t)[i, i] for t in times])
        if type == "link":
            point_draws, values = theta[:, :, i], picked[:, :, i]
        else:
            point_draws = inverse_link(dist, theta[:, :, i], u)
            values = inverse_link(dist, picked[:, :, i], u)
        if interval == "prediction":
            values = draw(dist, picked[:, :, i], u, rng)
        mean[:, i] = w @ point_draws
        lower[:, i], upper[:, i] = np.quantile(values, probs, axis=0)

    return Forecast(
        times=times,
        mean=mean,
        lower=lower,
        upper=upper,
        interval=interval,
        level=level,
        series_names=model.series_names,
    )
