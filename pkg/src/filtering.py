"""
Sequential Kalman filter with exact diffuse initialization
Each element of y_t is processed as a scalar observation; the diffuse
phase tracks P_inf separately from P_star until P_inf vanishes
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .errors import DiffusePhaseError, ModelError, NumericError
from .model import StateSpaceModel, UnivariateView, missing_pattern

LOG2PI = np.log(2 * np.pi)

# step kinds recorded per (t, i)
STEP_MISSING = -1
STEP_REGULAR = 0
STEP_DIFFUSE = 1
STEP_DIFFUSE_ZERO = 2

F_FLOOR = 100 * np.finfo(float).eps

logger = logging.getLogger("Filter")


@dataclass(frozen=True, eq=False)
class FilterResult:
    """
    Output of the sequential filter

    Time indices are 0-based. ``d`` counts the time points that contained
    diffuse steps, so ``Pinf`` has d + 1 slices with ``Pinf[d]`` zero and
    ``Finf``/``Kinf`` cover times ``0..d-1``. ``j`` is the series index at
    which P_inf vanished at time ``d - 1`` (-1 when there is no diffuse phase).
    Gains are unnormalized: K = P z', Kinf = Pinf z'.
    """

    model: StateSpaceModel
    view: UnivariateView
    a: np.ndarray
    P: np.ndarray
    Pinf: np.ndarray
    v: np.ndarray
    F: np.ndarray
    Finf: np.ndarray
    K: np.ndarray
    Kinf: np.ndarray
    steps: np.ndarray
    d: int
    j: int
    logL_terms: np.ndarray
    att: np.ndarray
    Ptt: np.ndarray

    @property
    def n(self) -> int:
        return self.v.shape[0]


def _zero_threshold(tol: float, z: np.ndarray, Pinf: np.ndarray) -> float:
    """Level below which F_inf counts as zero, scaled by |z| |P_inf| |z|'"""
    za = np.abs(z)
    return tol * max(1.0, float(za @ np.abs(Pinf) @ za))


def kalman_filter(model: StateSpaceModel) -> FilterResult:
    """
    Run the exact diffuse sequential filter

    Args:
        model: Gaussian state space model (non-gaussian series must first be
            replaced by the approximating model)

    Returns:
        FilterResult with predictions a_t, P_t for t = 0..n
    """
    if not model.gaussian:
        raise ModelError(
            "filter requires gaussian series; approximate non-gaussian series first"
        )
    n, p, m = model.n, model.p, model.m
    view = UnivariateView(model)
    observed = view.observed
    tol = model.tol

    a = np.zeros((n + 1, m))
    P = np.zeros((n + 1, m, m))
    att = np.zeros((n, m))
    Ptt = np.zeros((n, m, m))
    Pinf_hist = np.zeros((n + 1, m, m))
    v = np.full((n, p), np.nan)
    F = np.full((n, p), np.nan)
    K = np.zeros((n, p, m))
    Finf = np.zeros((n, p))
    Kinf = np.zeros((n, p, m))
    steps = np.full((n, p), STEP_MISSING, dtype=int)
    w = np.zeros((n, p))

    at = model.a1.copy()
    Pt = model.P1.copy()
    Pinf = model.P1inf.copy()
    diffuse = bool(np.any(Pinf != 0))
    d, j = 0, -1

    for t in range(n):
        a[t], P[t] = at, Pt
        if diffuse:
            Pinf_hist[t] = Pinf
        yt, Zt, ht = view.at(t)
        for i in range(p):
            if not observed[t, i]:
                continue
            z = Zt[i]
            vi = yt[i] - z @ at
            Mi = Pt @ z
            Fi = z @ Mi + ht[i]
            v[t, i], F[t, i], K[t, i] = vi, Fi, Mi
            if diffuse:
                Minf = Pinf @ z
                Fi_inf = z @ Minf
                Finf[t, i], Kinf[t, i] = Fi_inf, Minf
                if Fi_inf > _zero_threshold(tol, z, Pinf):
                    steps[t, i] = STEP_DIFFUSE
                    at = at + Minf * (vi / Fi_inf)
                    Pt = (
                        Pt
                        + np.outer(Minf, Minf) * (Fi / Fi_inf**2)
                        - (np.outer(Mi, Minf) + np.outer(Minf, Mi)) / Fi_inf
                    )
                    Pinf = Pinf - np.outer(Minf, Minf) / Fi_inf
                    w[t, i] = np.log(Fi_inf)
                else:
                    steps[t, i] = STEP_DIFFUSE_ZERO
                    if Fi > F_FLOOR * max(1.0, float(z @ z)):
                        at = at + Mi * (vi / Fi)
                        Pt = Pt - np.outer(Mi, Mi) / Fi
                        w[t, i] = LOG2PI + np.log(Fi) + vi**2 / Fi
                if not (np.isfinite(vi) and np.isfinite(Fi) and np.isfinite(Fi_inf)):
                    raise NumericError("non-finite value in diffuse filter", (t, i))
                if np.abs(Pinf).max(initial=0.0) <= tol:
                    Pinf = np.zeros_like(Pinf)
                    diffuse = False
                    d, j = t + 1, i
            else:
                steps[t, i] = STEP_REGULAR
                if not (np.isfinite(vi) and np.isfinite(Fi)):
                    raise NumericError("non-finite value in filter", (t, i))
                if Fi > F_FLOOR * max(1.0, float(z @ z)):
                    at = at + Mi * (vi / Fi)
                    Pt = Pt - np.outer(Mi, Mi) / Fi
                    w[t, i] = LOG2PI + np.log(Fi) + vi**2 / Fi

        att[t], Ptt[t] = at, Pt
        Tt = model.T_at(t)
        at = Tt @ at
        Pt = Tt @ Pt @ Tt.T + model.RQR_at(t)
        Pt = (Pt + Pt.T) / 2
        if diffuse:
            Pinf = Tt @ Pinf @ Tt.T
            Pinf = (Pinf + Pinf.T) / 2
            if np.abs(Pinf).max(initial=0.0) <= tol:
                Pinf = np.zeros_like(Pinf)
                diffuse = False
                d, j = t + 1, p - 1

    a[n], P[n] = at, Pt
    if diffuse:
        logger.warning(
            "Diffuse phase did not terminate; P_inf is nonzero after all "
            f"{n} time points (rank deficient information)"
        )
        d, j = n, p - 1
        Pinf_hist[n] = Pinf
    else:
        Pinf_hist[d] = 0.0

    steps_diffuse = steps[:d]
    logger.debug(f"Filter finished: n={n}, p={p}, m={m}, d={d}, j={j}")
    return FilterResult(
        model=model,
        view=view,
        a=a,
        P=P,
        Pinf=Pinf_hist[: d + 1],
        v=v,
        F=F,
        Finf=np.where(steps_diffuse >= STEP_DIFFUSE, Finf[:d], 0.0),
        K=K,
        Kinf=Kinf[:d],
        steps=steps,
        d=d,
        j=j,
        logL_terms=w,
        att=att,
        Ptt=Ptt,
    )


@dataclass(frozen=True)
class MultivariateStep:
    """Conventional multivariate innovation quantities at one time point"""

    t: int
    observed: np.ndarray
    v: np.ndarray
    F: np.ndarray
    K: np.ndarray


def reconstruct_multivariate(
    fr: FilterResult, model: StateSpaceModel, t: int
) -> MultivariateStep:
    """
    Multivariate v_t, F_t and K_t = P_t Z_t' on the observed rows at time t

    Computed in the original coordinates, so no LDL back-rotation is needed.
    """
    if t < fr.d:
        raise DiffusePhaseError(
            f"time {t} lies in the diffuse phase (d={fr.d}); v and F are not defined"
        )
    idx = np.flatnonzero(missing_pattern(model)[t])
    Z = model.Z_at(t)[idx]
    at, Pt = fr.a[t], fr.P[t]
    v = model.y[t, idx] - Z @ at
    F = Z @ Pt @ Z.T + model.H_at(t)[np.ix_(idx, idx)]
    return MultivariateStep(t=t, observed=idx, v=v, F=(F + F.T) / 2, K=Pt @ Z.T)


@dataclass(frozen=True)
class OracleResult:
    """Textbook multivariate filter output"""

    a: np.ndarray
    P: np.ndarray
    v: List[np.ndarray]
    F: List[np.ndarray]
    logL: float


def filter_multivariate_oracle(model: StateSpaceModel) -> OracleResult:
    """Conventional multivariate Kalman filter for proper priors (test oracle)"""
    if np.any(model.P1inf != 0):
        raise ModelError("the multivariate reference filter requires P1inf = 0")
    n, m = model.n, model.m
    observed = missing_pattern(model)
    a = np.zeros((n + 1, m))
    P = np.zeros((n + 1, m, m))
    vs: List[np.ndarray] = []
    Fs: List[np.ndarray] = []
    at, Pt = model.a1.copy(), model.P1.copy()
    logL = 0.0
    for t in range(n):
        a[t], P[t] = at, Pt
        idx = np.flatnonzero(observed[t])
        if idx.size:
            Z = model.Z_at(t)[idx]
            vt = model.y[t, idx] - Z @ at
            Ft = Z @ Pt @ Z.T + model.H_at(t)[np.ix_(idx, idx)]
            try:
                Finv = np.linalg.inv(Ft)
            except np.linalg.LinAlgError as e:
                raise NumericError(f"singular F: {e}", (t, 0)) from e
            if not np.all(np.isfinite(Finv)) or np.linalg.cond(Ft) > 1e15:
                raise NumericError("singular F", (t, 0))
            Kt = Pt @ Z.T @ Finv
            at = at + Kt @ vt
            Pt = Pt - Kt @ Z @ Pt
            _, logdet = np.linalg.slogdet(Ft)
            logL -= 0.5 * (idx.size * np.log(2 * np.pi) + logdet + vt @ Finv @ vt)
            vs.append(vt)
            Fs.append(Ft)
        else:
            vs.append(np.empty(0))
            Fs.append(np.empty((0, 0)))
        Tt = model.T_at(t)
        at = Tt @ at
        Pt = Tt @ Pt @ Tt.T + model.RQR_at(t)
        Pt = (Pt + Pt.T) / 2
    a[n], P[n] = at, Pt
    return OracleResult(a=a, P=P, v=vs, F=Fs, logL=float(logL))


def batch_filter(fr: FilterResult, Y: np.ndarray, a1: Optional[np.ndarray] = None):
    """
    Rerun the mean recursion of a filter for many observation sets

    The gains depend only on the model and the missing pattern, so draws
    sharing that pattern reuse them.

    Args:
        fr: Filter result of the model
        Y: (nsim, n, p) observations with the model's missing pattern
        a1: Optional (nsim, m) initial means (defaults to the model's a1)

    Returns:
        Tuple (a, v) with a of shape (nsim, n + 1, m) and v of shape (nsim, n, p)
    """
    model = fr.model
    n, p, m = model.n, model.p, model.m
    nsim = Y.shape[0]
    a = np.zeros((nsim, n + 1, m))
    v = np.zeros((nsim, n, p))
    at = np.broadcast_to(model.a1 if a1 is None else a1, (nsim, m)).copy()
    for t in range(n):
        a[:, t] = at
        yt = fr.view.transform(t, Y[:, t, :])
        Zt = fr.view.at(t)[1]
        for i in range(p):
            kind = fr.steps[t, i]
            if kind == STEP_MISSING:
                continue
            vi = yt[:, i] - at @ Zt[i]
            v[:, t, i] = vi
            if kind == STEP_DIFFUSE:
                at = at + np.outer(vi / fr.Finf[t, i], fr.Kinf[t, i])
            elif fr.F[t, i] > F_FLOOR * max(1.0, float(Zt[i] @ Zt[i])):
                at = at + np.outer(vi / fr.F[t, i], fr.K[t, i])
        at = at @ model.T_at(t).T
    a[:, n] = at
    return a, v
