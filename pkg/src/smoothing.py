"""
State and disturbance smoothing for the sequential filter
One backward pass carries r0/N0 and, inside the diffuse phase, r1/N1/N2
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import UsageError
from .filtering import (
    F_FLOOR,
    STEP_DIFFUSE,
    STEP_DIFFUSE_ZERO,
    STEP_MISSING,
    FilterResult,
    batch_filter,
)
from .model import StateSpaceModel

logger = logging.getLogger("Smoother")


@dataclass(frozen=True, eq=False)
class SmoothResult:
    """
    Smoothed states, signals and disturbances

    ``r0[t]``/``N0[t]`` hold the accumulators after processing time t
    (``r0[n]`` is zero); ``r1``, ``N1``, ``N2`` cover the diffuse times only.
    Disturbance estimates of missing cells are zero with prior variance.
    """

    alphahat: np.ndarray
    V: np.ndarray
    thetahat: np.ndarray
    Vtheta: np.ndarray
    epshat: np.ndarray
    Veps: np.ndarray
    etahat: np.ndarray
    Veta: np.ndarray
    r0: np.ndarray
    N0: np.ndarray
    r1: np.ndarray
    N1: np.ndarray
    N2: np.ndarray


def _check_pair(fr: FilterResult, model: StateSpaceModel):
    if fr.model is model:
        return
    if (fr.model.n, fr.model.p, fr.model.m) != (model.n, model.p, model.m) or not (
        np.array_equal(fr.model.y, model.y, equal_nan=True)
    ):
        raise UsageError("filter result was computed on a different model")


def _sym(A: np.ndarray) -> np.ndarray:
    return (A + A.T) / 2


def _backward_pass(fr: FilterResult, model: StateSpaceModel) -> SmoothResult:
    _check_pair(fr, model)
    model = fr.model
    n, p, m, k, d = model.n, model.p, model.m, model.k, fr.d
    view = fr.view

    alphahat = np.zeros((n, m))
    V = np.zeros((n, m, m))
    eps = np.zeros((n, p))
    Veps = np.zeros((n, p))
    etahat = np.zeros((n, k))
    Veta = np.zeros((n, k, k))
    r0_hist = np.zeros((n + 1, m))
    N0_hist = np.zeros((n + 1, m, m))
    r1_hist = np.zeros((d + 1, m))
    N1_hist = np.zeros((d + 1, m, m))
    N2_hist = np.zeros((d + 1, m, m))

    r0 = np.zeros(m)
    r1 = np.zeros(m)
    N0 = np.zeros((m, m))
    N1 = np.zeros((m, m))
    N2 = np.zeros((m, m))
    I = np.eye(m)

    for t in range(n - 1, -1, -1):
        Q, R = model.Q_at(t), model.R_at(t)
        QR = Q @ R.T
        etahat[t] = QR @ r0
        Veta[t] = _sym(Q - QR @ N0 @ QR.T)

        Tt = model.T_at(t)
        r0 = Tt.T @ r0
        N0 = _sym(Tt.T @ N0 @ Tt)
        if t < d:
            r1 = Tt.T @ r1
            N1 = _sym(Tt.T @ N1 @ Tt)
            N2 = _sym(Tt.T @ N2 @ Tt)

        _, Zt, ht = view.at(t)
        eps_t = np.zeros(p)
        Veps_t = ht.astype(float).copy()
        for i in range(p - 1, -1, -1):
            kind = fr.steps[t, i]
            if kind == STEP_MISSING:
                continue
            z = Zt[i]
            vi, Fi, Ki = fr.v[t, i], fr.F[t, i], fr.K[t, i]
            if kind == STEP_DIFFUSE:
                Finf, Kinf = fr.Finf[t, i], fr.Kinf[t, i]
                eps_t[i] = -ht[i] * (Kinf @ r0) / Finf
                Veps_t[i] = ht[i] - ht[i] ** 2 * (Kinf @ N0 @ Kinf) / Finf**2
                Linf = I - np.outer(Kinf, z) / Finf
                L1 = np.outer(Kinf * (Fi / Finf) - Ki, z) / Finf
                r1 = z * (vi / Finf) + Linf.T @ r1 + L1.T @ r0
                r0 = Linf.T @ r0
                N1L1 = Linf.T @ N1 @ L1
                N2 = _sym(
                    L1.T @ N0 @ L1
                    + N1L1
                    + N1L1.T
                    + Linf.T @ N2 @ Linf
                    - np.outer(z, z) * (Fi / Finf**2)
                )
                N0L = L1.T @ N0 @ Linf
                N1 = _sym(np.outer(z, z) / Finf + Linf.T @ N1 @ Linf + N0L + N0L.T)
                N0 = _sym(Linf.T @ N0 @ Linf)
            elif Fi > F_FLOOR * max(1.0, float(z @ z)):
                eps_t[i] = ht[i] * (vi - Ki @ r0) / Fi
                Veps_t[i] = ht[i] - ht[i] ** 2 * (Fi + Ki @ N0 @ Ki) / Fi**2
                L = I - np.outer(Ki, z) / Fi
                r0 = z * (vi / Fi) + L.T @ r0
                N0 = _sym(np.outer(z, z) / Fi + L.T @ N0 @ L)
                if kind == STEP_DIFFUSE_ZERO:
                    r1 = L.T @ r1
                    N1 = _sym(L.T @ N1 @ L)
                    N2 = _sym(L.T @ N2 @ L)
            else:
                Veps_t[i] = 0.0

        r0_hist[t], N0_hist[t] = r0, N0
        Pt = fr.P[t]
        alphahat[t] = fr.a[t] + Pt @ r0
        Vt = Pt - Pt @ N0 @ Pt
        if t < d:
            Pinf = fr.Pinf[t]
            r1_hist[t], N1_hist[t], N2_hist[t] = r1, N1, N2
            alphahat[t] += Pinf @ r1
            PN1P = Pinf @ N1 @ Pt
            Vt = Vt - PN1P - PN1P.T - Pinf @ N2 @ Pinf
        V[t] = _sym(Vt)

        if view.diagonal:
            epshat_t, Veps_t = eps_t, Veps_t
        else:
            epshat_t = view.untransform(t, eps_t)
            Z = model.Z_at(t)
            Veps_t = np.diag(Z @ V[t] @ Z.T).copy()
            missing = ~view.observed[t]
            Veps_t[missing] = np.diag(model.H_at(t))[missing]
        eps[t], Veps[t] = epshat_t, Veps_t

    Zs = _Z_series(model)
    thetahat = np.einsum("tpm,tm->tp", Zs, alphahat)
    Vtheta = np.einsum("tpm,tmk,tqk->tpq", Zs, V, Zs)

    logger.debug(f"Smoother finished: n={n}, m={m}, d={d}")
    return SmoothResult(
        alphahat=alphahat,
        V=V,
        thetahat=thetahat,
        Vtheta=Vtheta,
        epshat=eps,
        Veps=Veps,
        etahat=etahat,
        Veta=Veta,
        r0=r0_hist,
        N0=N0_hist,
        r1=r1_hist,
        N1=N1_hist,
        N2=N2_hist,
    )


def _Z_series(model: StateSpaceModel, columns: Optional[np.ndarray] = None) -> np.ndarray:
    """Z as an (n, p, m) array, optionally keeping only some state columns"""
    Z = model.Z
    if Z.shape[2] == 1:
        Zs = np.broadcast_to(Z[:, :, 0], (model.n, model.p, model.m))
    else:
        Zs = np.moveaxis(Z[:, :, : model.n], 2, 0)
    if columns is not None:
        mask = np.zeros(model.m, dtype=bool)
        mask[columns] = True
        Zs = Zs * mask
    return Zs


def smooth_states(fr: FilterResult, model: StateSpaceModel) -> SmoothResult:
    """
    Smoothed states alpha_t | y and signals Z_t alpha_t | y

    Args:
        fr: Filter output computed on ``model``
        model: The same gaussian model

    Returns:
        SmoothResult (disturbances are filled by the same backward pass)
    """
    return _backward_pass(fr, model)


def smooth_disturbances(fr: FilterResult, model: StateSpaceModel) -> SmoothResult:
    """Smoothed disturbances eps_t | y and eta_t | y with their variances"""
    return _backward_pass(fr, model)


def signal_moments(
    model: StateSpaceModel, sm: SmoothResult, columns: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of Z_t alpha_t restricted to the given state columns"""
    Zs = _Z_series(model, columns)
    mean = np.einsum("tpm,tm->tp", Zs, sm.alphahat)
    var = np.einsum("tpm,tmk,tqk->tpq", Zs, sm.V, Zs)
    return mean, var


def batch_smoother(
    fr: FilterResult, Y: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Smoothed means for many observation sets sharing the model's gains

    Args:
        fr: Filter result of the model
        Y: (nsim, n, p) observations with the model's missing pattern

    Returns:
        Tuple (alphahat, epshat, etahat) with leading dimension nsim
    """
    model = fr.model
    n, p, m, k, d = model.n, model.p, model.m, model.k, fr.d
    nsim = Y.shape[0]
    view = fr.view
    a, v = batch_filter(fr, Y)

    alphahat = np.zeros((nsim, n, m))
    epshat = np.zeros((nsim, n, p))
    etahat = np.zeros((nsim, n, k))
    r0 = np.zeros((nsim, m))
    r1 = np.zeros((nsim, m))

    for t in range(n - 1, -1, -1):
        QR = model.Q_at(t) @ model.R_at(t).T
        etahat[:, t] = r0 @ QR.T
        Tt = model.T_at(t)
        r0 = r0 @ Tt
        if t < d:
            r1 = r1 @ Tt
        _, Zt, ht = view.at(t)
        eps_t = np.zeros((nsim, p))
        for i in range(p - 1, -1, -1):
            kind = fr.steps[t, i]
            if kind == STEP_MISSING:
                continue
            z = Zt[i]
            vi, Fi, Ki = v[:, t, i], fr.F[t, i], fr.K[t, i]
            if kind == STEP_DIFFUSE:
                Finf, Kinf = fr.Finf[t, i], fr.Kinf[t, i]
                eps_t[:, i] = -ht[i] * (r0 @ Kinf) / Finf
                # r' L = r - (r . K) z' / F
                r0K = r0 @ Kinf
                r1K = r1 @ Kinf
                L1r0 = np.outer(r0 @ (Kinf * (Fi / Finf) - Ki), z) / Finf
                r1 = np.outer(vi / Finf, z) + r1 - np.outer(r1K / Finf, z) + L1r0
                r0 = r0 - np.outer(r0K / Finf, z)
            elif Fi > F_FLOOR * max(1.0, float(z @ z)):
                r0K = r0 @ Ki
                eps_t[:, i] = ht[i] * (vi - r0K) / Fi
                r0 = np.outer(vi / Fi, z) + r0 - np.outer(r0K / Fi, z)
                if kind == STEP_DIFFUSE_ZERO:
                    r1 = r1 - np.outer((r1 @ Ki) / Fi, z)
        alphahat[:, t] = a[:, t] + r0 @ fr.P[t]
        if t < d:
            alphahat[:, t] += r1 @ fr.Pinf[t]
        epshat[:, t] = view.untransform(t, eps_t)

    return alphahat, epshat, etahat
