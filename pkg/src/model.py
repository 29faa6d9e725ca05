"""
State space model container
Holds observations, system matrices and the initial distribution,
validates them and provides the univariate (sequential) view of the data
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ModelError, NumericError

MISSING = np.nan

DISTRIBUTIONS = ("gaussian", "poisson", "binomial", "gamma", "negative-binomial")

SYSTEM_MATRICES = ("Z", "H", "T", "R", "Q")

LDL_PIVOT_TOL = 1e-12

logger = logging.getLogger("Model")


def _as_cube(value, name: str, row_vector: bool = False) -> np.ndarray:
    """Coerce a matrix or array of matrices to shape (rows, cols, slices)"""
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if row_vector else arr.reshape(-1, 1)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ModelError(f"{name} must have at most three dimensions, got {arr.ndim}")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    """
    Linear state space model with exact diffuse initialization

        y_t = Z_t alpha_t + eps_t,          eps_t ~ N(0, H_t)
        alpha_{t+1} = T_t alpha_t + R_t eta_t,  eta_t ~ N(0, Q_t)
        alpha_1 ~ N(a1, P1 + kappa * P1inf), kappa -> infinity

    System matrices are stored as (rows, cols, slices) arrays where slices
    is 1 for time invariant matrices and n (or n + 1) otherwise. Missing
    observations are NaN. Non-gaussian series use u instead of H.
    """

    y: np.ndarray
    Z: np.ndarray
    H: np.ndarray
    T: np.ndarray
    R: np.ndarray
    Q: np.ndarray
    a1: np.ndarray
    P1: np.ndarray
    P1inf: np.ndarray
    u: Optional[np.ndarray] = None
    distribution: Tuple[str, ...] = ()
    tol: Optional[float] = None
    state_names: Tuple[str, ...] = ()
    eta_names: Tuple[str, ...] = ()
    series_names: Tuple[str, ...] = ()

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        T = _as_cube(self.T, "T")
        m = T.shape[0]
        Z = _as_cube(self.Z, "Z", row_vector=True)
        R = _as_cube(self.R, "R")
        Q = _as_cube(self.Q, "Q")
        H = _as_cube(self.H, "H")
        a1 = np.array(self.a1, dtype=float).reshape(-1)
        P1 = np.array(self.P1, dtype=float)
        P1inf = np.array(self.P1inf, dtype=float)
        if P1.ndim < 2:
            P1 = P1.reshape(1, 1) if P1.size == 1 else np.diag(P1)
        if P1inf.ndim < 2:
            P1inf = P1inf.reshape(1, 1) if P1inf.size == 1 else np.diag(P1inf)

        n, p = y.shape
        u = np.ones((n, p)) if self.u is None else np.array(self.u, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        distribution = tuple(self.distribution) or ("gaussian",) * p
        tol = np.finfo(float).eps ** 0.5 if self.tol is None else float(self.tol)
        k = R.shape[1]
        state_names = tuple(self.state_names) or tuple(f"state{i + 1}" for i in range(m))
        eta_names = tuple(self.eta_names) or tuple(f"eta{i + 1}" for i in range(k))
        series_names = tuple(self.series_names) or tuple(
            f"y{i + 1}" if p > 1 else "y" for i in range(p)
        )

        for name, value in (
            ("y", y),
            ("Z", Z),
            ("H", H),
            ("T", T),
            ("R", R),
            ("Q", Q),
            ("a1", a1),
            ("P1", P1),
            ("P1inf", P1inf),
            ("u", u),
        ):
            object.__setattr__(self, name, _frozen(value))
        object.__setattr__(self, "distribution", distribution)
        object.__setattr__(self, "tol", tol)
        object.__setattr__(self, "state_names", state_names)
        object.__setattr__(self, "eta_names", eta_names)
        object.__setattr__(self, "series_names", series_names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.y.shape[1]

    @property
    def m(self) -> int:
        return self.T.shape[0]

    @property
    def k(self) -> int:
        return self.R.shape[1]

    @property
    def tv(self) -> Dict[str, bool]:
        """Whether each system matrix is time varying"""
        return {name: getattr(self, name).shape[2] > 1 for name in SYSTEM_MATRICES}

    @property
    def gaussian(self) -> bool:
        return all(d == "gaussian" for d in self.distribution)

    @property
    def nongaussian_series(self) -> np.ndarray:
        return np.array([d != "gaussian" for d in self.distribution], dtype=bool)

    @property
    def diffuse_states(self) -> np.ndarray:
        return np.diag(self.P1inf) > 0

    @staticmethod
    def _slice(arr: np.ndarray, t: int) -> np.ndarray:
        return arr[:, :, min(t, arr.shape[2] - 1)]

    def Z_at(self, t: int) -> np.ndarray:
        return self._slice(self.Z, t)

    def H_at(self, t: int) -> np.ndarray:
        return self._slice(self.H, t)

    def T_at(self, t: int) -> np.ndarray:
        return self._slice(self.T, t)

    def R_at(self, t: int) -> np.ndarray:
        return self._slice(self.R, t)

    def Q_at(self, t: int) -> np.ndarray:
        return self._slice(self.Q, t)

    def RQR_at(self, t: int) -> np.ndarray:
        R = self.R_at(t)
        return R @ self.Q_at(t) @ R.T

    def replace(self, **changes) -> "StateSpaceModel":
        """Return a copy with some fields replaced"""
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class Violation:
    """A single invariant violation"""

    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


def _psd(S: np.ndarray, scale: float) -> bool:
    if S.size == 0:
        return True
    return np.linalg.eigvalsh((S + S.T) / 2).min() >= -1e-10 * max(scale, 1.0)


def validate(model: StateSpaceModel) -> List[Violation]:
    """
    Check every model invariant

    Args:
        model: Model to check

    Returns:
        List of violations, empty when the model is valid
    """
    violations: List[Violation] = []
    n, p, m, k = model.n, model.p, model.m, model.k

    expected = {
        "Z": (p, m),
        "H": (p, p),
        "T": (m, m),
        "R": (m, k),
        "Q": (k, k),
    }
    for name, shape in expected.items():
        arr = getattr(model, name)
        if arr.shape[:2] != shape:
            violations.append(
                Violation(
                    "dimension-mismatch",
                    f"{name} has shape {arr.shape[:2]}, expected {shape}",
                )
            )
        if arr.shape[2] not in (1, n, n + 1):
            violations.append(
                Violation(
                    "dimension-mismatch",
                    f"{name} has {arr.shape[2]} time slices, expected 1, {n} or {n + 1}",
                )
            )
    for name, shape in (("a1", (m,)), ("P1", (m, m)), ("P1inf", (m, m)), ("u", (n, p))):
        if getattr(model, name).shape != shape:
            violations.append(
                Violation(
                    "dimension-mismatch",
                    f"{name} has shape {getattr(model, name).shape}, expected {shape}",
                )
            )
    if len(model.distribution) != p:
        violations.append(
            Violation(
                "dimension-mismatch",
                f"{len(model.distribution)} distributions given for {p} series",
            )
        )
    for name, names, size in (
        ("state_names", model.state_names, m),
        ("eta_names", model.eta_names, k),
        ("series_names", model.series_names, p),
    ):
        if len(names) != size:
            violations.append(
                Violation("name-count", f"{len(names)} {name} given, expected {size}")
            )
    if violations:
        return violations

    for name in ("Z", "H", "T", "R", "Q", "a1", "P1", "P1inf", "u"):
        if not np.all(np.isfinite(getattr(model, name))):
            violations.append(
                Violation("nonfinite-matrix", f"{name} contains non-finite values")
            )
    if model.tol < 0:
        violations.append(Violation("negative-tol", f"tol is {model.tol}"))

    unknown = [d for d in model.distribution if d not in DISTRIBUTIONS]
    for dist in unknown:
        violations.append(
            Violation("unknown-distribution", f"unknown distribution '{dist}'")
        )

    P1, P1inf = model.P1, model.P1inf
    scale = float(np.abs(P1).max()) if P1.size else 0.0
    if not np.allclose(P1, P1.T, atol=1e-12 * max(scale, 1.0)):
        violations.append(Violation("p1-not-symmetric", "P1 is not symmetric"))
    elif not _psd(P1, scale):
        violations.append(
            Violation("p1-not-psd", "P1 is not positive semidefinite")
        )
    if np.any(P1inf - np.diag(np.diag(P1inf)) != 0):
        violations.append(Violation("p1inf-not-diagonal", "P1inf is not diagonal"))
    diag_inf = np.diag(P1inf)
    if not np.all(np.isin(diag_inf, (0.0, 1.0))):
        violations.append(
            Violation("p1inf-not-binary", "P1inf diagonal entries must be 0 or 1")
        )
    diffuse = diag_inf != 0
    if np.any(P1[diffuse, :] != 0) or np.any(P1[:, diffuse] != 0):
        states = [model.state_names[i] for i in np.flatnonzero(diffuse)]
        violations.append(
            Violation(
                "diffuse-row-nonzero",
                f"P1 rows of diffuse states {states} must be zero",
            )
        )

    for s in range(model.H.shape[2]):
        H = model.H[:, :, s]
        if not np.allclose(H, H.T, atol=1e-12 * max(np.abs(H).max(initial=0), 1.0)):
            violations.append(
                Violation("h-not-symmetric", f"H is not symmetric at slice {s}")
            )
            break
    for s in range(model.Q.shape[2]):
        Q = model.Q[:, :, s]
        if not np.allclose(Q, Q.T, atol=1e-12 * max(np.abs(Q).max(initial=0), 1.0)):
            violations.append(
                Violation("q-not-symmetric", f"Q is not symmetric at slice {s}")
            )
            break

    nongaussian = np.array([d != "gaussian" for d in model.distribution], dtype=bool)
    if nongaussian.any():
        if np.any(model.H[nongaussian, :, :] != 0) or np.any(
            model.H[:, nongaussian, :] != 0
        ):
            violations.append(
                Violation(
                    "h-nongaussian-nonzero",
                    "H rows and columns of non-gaussian series must be zero",
                )
            )
        if np.any(model.u[:, nongaussian] <= 0):
            violations.append(
                Violation("nonpositive-u", "u must be positive for non-gaussian series")
            )

    return violations


def check(model: StateSpaceModel) -> StateSpaceModel:
    """Raise ModelError listing all violations if the model is invalid"""
    violations = validate(model)
    if violations:
        raise ModelError("; ".join(str(v) for v in violations))
    return model


def missing_pattern(model: StateSpaceModel) -> np.ndarray:
    """Boolean n x p array, True where the observation is usable"""
    return ~np.isnan(model.y)


@dataclass(frozen=True)
class LDLResult:
    """
    LDL transform of the observation equation at one time point

    L is unit lower triangular with L diag(D) L' = H on the observed rows.
    Missing rows carry identity rows in L and their H diagonal in D.
    """

    L: np.ndarray
    y: np.ndarray
    Z: np.ndarray
    D: np.ndarray


def _ldl(H: np.ndarray, t: int) -> Tuple[np.ndarray, np.ndarray]:
    q = H.shape[0]
    L = np.eye(q)
    D = np.zeros(q)
    scale = float(np.max(np.diag(H), initial=0.0))
    for j in range(q):
        dj = H[j, j] - np.sum(L[j, :j] ** 2 * D[:j])
        if dj < -LDL_PIVOT_TOL * max(scale, 1e-300):
            raise NumericError("negative pivot in LDL decomposition of H", (t, j))
        if dj <= LDL_PIVOT_TOL * scale:
            dj = 0.0
        D[j] = dj
        if dj > 0:
            for i in range(j + 1, q):
                L[i, j] = (H[i, j] - np.sum(L[i, :j] * L[j, :j] * D[:j])) / dj
    return L, D


def ldl_transform(model: StateSpaceModel, t: int) -> LDLResult:
    """
    Decorrelate the observation noise at time t

    Args:
        model: Model whose series are all gaussian at time t
        t: Time index (0-based)

    Returns:
        LDLResult with transformed y and Z so that the noise covariance is diag(D)
    """
    if model.nongaussian_series.any():
        raise ModelError("LDL transform requires gaussian series")
    H = model.H_at(t)
    if not np.allclose(H, H.T, atol=1e-12 * max(np.abs(H).max(initial=0), 1.0)):
        raise ModelError(f"H is not symmetric at t={t}")
    p = model.p
    obs = ~np.isnan(model.y[t])
    idx = np.flatnonzero(obs)

    L = np.eye(p)
    D = np.diag(H).astype(float).copy()
    y = model.y[t].copy()
    Z = model.Z_at(t).copy()
    if idx.size:
        Lo, Do = _ldl(H[np.ix_(idx, idx)], t)
        L[np.ix_(idx, idx)] = Lo
        D[idx] = Do
        y[idx] = solve_triangular(Lo, y[idx], lower=True, unit_diagonal=True)
        Z[idx] = solve_triangular(Lo, Z[idx], lower=True, unit_diagonal=True)
    return LDLResult(L=L, y=y, Z=Z, D=D)


class UnivariateView:
    """
    Per-time scalar observation equations used by the sequential filter

    Time points whose observed block of H is diagonal pass through
    unchanged; the others are LDL transformed. Factorizations are cached
    per missing pattern when Z and H are time invariant.
    """

    def __init__(self, model: StateSpaceModel):
        self.model = model
        H = model.H
        off = H - np.einsum("ii...->i...", H)[:, None, :] * np.eye(model.p)[:, :, None]
        self.diagonal = not np.any(off != 0)
        self._cache: Dict[Tuple, Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        self._observed = missing_pattern(model)

    @property
    def observed(self) -> np.ndarray:
        return self._observed

    def _factor(self, t: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        model = self.model
        key = None
        if not (model.tv["Z"] or model.tv["H"]):
            key = tuple(self._observed[t])
            if key in self._cache:
                return self._cache[key]
        idx = np.flatnonzero(self._observed[t])
        H = model.H_at(t)
        L = np.eye(model.p)
        D = np.diag(H).astype(float).copy()
        Z = model.Z_at(t).copy()
        if idx.size:
            Lo, Do = _ldl(H[np.ix_(idx, idx)], t)
            L[np.ix_(idx, idx)] = Lo
            D[idx] = Do
            Z[idx] = solve_triangular(Lo, Z[idx], lower=True, unit_diagonal=True)
        result = (L, Z, D)
        if key is not None:
            self._cache[key] = result
        return result

    def at(self, t: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (y, Z, h) of the scalar equations at time t"""
        model = self.model
        if self.diagonal:
            return model.y[t], model.Z_at(t), np.diag(model.H_at(t))
        _, Z, D = self._factor(t)
        return self.transform(t, model.y[t]), Z, D

    def loading(self, t: int) -> np.ndarray:
        """Unit lower triangular L_t (identity when H is diagonal)"""
        if self.diagonal:
            return np.eye(self.model.p)
        return self._factor(t)[0]

    def transform(self, t: int, y: np.ndarray) -> np.ndarray:
        """Apply L_t^{-1} to observed rows of y (last axis has length p)"""
        if self.diagonal:
            return y
        idx = np.flatnonzero(self._observed[t])
        L = self._factor(t)[0]
        out = np.array(y, dtype=float, copy=True)
        if idx.size:
            Lo = L[np.ix_(idx, idx)]
            block = out[..., idx]
            out[..., idx] = solve_triangular(
                Lo, block.reshape(-1, idx.size).T, lower=True, unit_diagonal=True
            ).T.reshape(block.shape)
        return out

    def untransform(self, t: int, e: np.ndarray) -> np.ndarray:
        """Apply L_t to observed rows of e (last axis has length p)"""
        if self.diagonal:
            return e
        idx = np.flatnonzero(self._observed[t])
        L = self._factor(t)[0]
        out = np.array(e, dtype=float, copy=True)
        if idx.size:
            Lo = L[np.ix_(idx, idx)]
            out[..., idx] = out[..., idx] @ Lo.T
        return out


def extend(
    model: StateSpaceModel,
    horizon: int,
    newdata: Optional[Mapping[str, np.ndarray]] = None,
) -> StateSpaceModel:
    """
    Append future time points with missing observations

    Args:
        model: Fitted model
        horizon: Number of time points to append
        newdata: Optional future system matrices (Z, H, T, R, Q with
            horizon slices) and u (horizon x p)

    Returns:
        Model of length n + horizon
    """
    newdata = dict(newdata or {})
    unknown = set(newdata) - set(SYSTEM_MATRICES) - {"u"}
    if unknown:
        raise ModelError(f"unknown horizon fields {sorted(unknown)}")
    n, p = model.n, model.p
    changes = {"y": np.vstack([model.y, np.full((horizon, p), MISSING)])}

    for name in SYSTEM_MATRICES:
        arr = getattr(model, name)
        future = newdata.get(name)
        if future is None:
            if arr.shape[2] > 1:
                raise ModelError(
                    f"{name} is time varying; horizon values for it must be supplied"
                )
            continue
        future = _as_cube(future, name, row_vector=(name == "Z"))
        if future.shape[:2] != arr.shape[:2]:
            raise ModelError(
                f"horizon {name} has shape {future.shape[:2]}, expected {arr.shape[:2]}"
            )
        if future.shape[2] == 1:
            future = np.repeat(future, horizon, axis=2)
        if future.shape[2] != horizon:
            raise ModelError(
                f"horizon {name} has {future.shape[2]} slices, expected {horizon}"
            )
        past = arr[:, :, :n] if arr.shape[2] > 1 else np.repeat(arr, n, axis=2)
        changes[name] = np.concatenate([past, future], axis=2)

    u = newdata.get("u")
    if u is None:
        if model.nongaussian_series.any():
            raise ModelError("horizon u must be supplied for non-gaussian series")
        u = np.ones((horizon, p))
    u = np.array(u, dtype=float).reshape(horizon, p)
    changes["u"] = np.vstack([model.u, u])
    return model.replace(**changes)


def with_proper_prior(
    model: StateSpaceModel, states: Sequence[int], variance: float
) -> StateSpaceModel:
    """Replace the diffuse prior of the given states by N(a1, variance)"""
    P1 = model.P1.copy()
    P1inf = model.P1inf.copy()
    for i in states:
        P1inf[i, i] = 0.0
        P1[i, i] = variance
    logger.debug(f"Proper prior with variance {variance:g} for states {list(states)}")
    return model.replace(P1=P1, P1inf=P1inf)
