"""
Component builders for structural, ARIMA, regression and custom models
Components are declared with build_* and assembled block-diagonally into
one StateSpaceModel; unknown covariances are marked with ESTIMATE
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import block_diag

from .errors import EstimationError, ModelError, NumericError
from .model import StateSpaceModel, _as_cube, validate

ESTIMATE = "estimate"
ESTIMATE_DIAGONAL = "estimate-diagonal"
MARKERS = (ESTIMATE, ESTIMATE_DIAGONAL)
TIE_TO_Q = "Q"

KINDS = ("trend", "seasonal", "cycle", "arima", "regression", "custom")

logger = logging.getLogger("Builders")


def _is_marker(value) -> bool:
    return isinstance(value, str) and value in MARKERS


# Unknown parameters


@dataclass(frozen=True)
class CovarianceBlock:
    """
    Estimable covariance written into one or more matrix blocks

    A variance (size 1) or a diagonal block uses log-variances; a full block
    uses S = U'U with U upper triangular, log-diagonal and free off-diagonal.

    Args:
        name: Label used in parameter names
        size: Block dimension
        structure: "full" or "diagonal"
        targets: (matrix name, global indices) pairs receiving the block
        init: Initial variance for every diagonal entry
    """

    name: str
    size: int
    structure: str
    targets: Tuple[Tuple[str, Tuple[int, ...]], ...]
    init: float = 1.0

    @property
    def cholesky(self) -> bool:
        return self.structure == "full" and self.size > 1

    @property
    def n_params(self) -> int:
        if self.cholesky:
            return self.size * (self.size + 1) // 2
        return self.size

    @property
    def parameter_names(self) -> List[str]:
        if self.size == 1:
            return [f"log_var({self.name})"]
        if not self.cholesky:
            return [f"log_var({self.name})[{i}]" for i in range(self.size)]
        names = [f"log_chol({self.name})[{i},{i}]" for i in range(self.size)]
        names += [
            f"chol({self.name})[{i},{j}]"
            for i in range(self.size)
            for j in range(i + 1, self.size)
        ]
        return names

    def initial(self) -> np.ndarray:
        x = np.zeros(self.n_params)
        if self.cholesky:
            x[: self.size] = 0.5 * np.log(self.init)
        else:
            x[:] = np.log(self.init)
        return x

    def matrix(self, x: np.ndarray) -> np.ndarray:
        if not self.cholesky:
            return np.diag(np.exp(x))
        U = np.diag(np.exp(x[: self.size]))
        U[np.triu_indices(self.size, 1)] = x[self.size :]
        return U.T @ U

    def natural(self, x: np.ndarray) -> np.ndarray:
        """Values on the variance scale matching parameter_names"""
        S = self.matrix(x)
        if not self.cholesky:
            return np.diag(S)
        return np.concatenate([np.diag(S), S[np.triu_indices(self.size, 1)]])

    def apply(self, x: np.ndarray, arrays: Dict[str, np.ndarray]):
        S = self.matrix(x)
        for name, idx in self.targets:
            arr = arrays[name]
            ix = np.ix_(idx, idx)
            if arr.ndim == 3:
                arr[ix[0], ix[1], :] = S[:, :, None]
            else:
                arr[ix] = S


@dataclass(frozen=True)
class ArimaBlock:
    """Estimable ARIMA coefficients and innovation variance of one component"""

    name: str
    n_ar: int
    n_ma: int
    d: int
    stationary: bool
    state_offset: int
    eta_offset: int
    init_ar: Tuple[float, ...]
    init_ma: Tuple[float, ...]
    init_sigma2: float

    @property
    def n_params(self) -> int:
        return self.n_ar + self.n_ma + 1

    @property
    def parameter_names(self) -> List[str]:
        return (
            [f"ar{i + 1}({self.name})" for i in range(self.n_ar)]
            + [f"ma{i + 1}({self.name})" for i in range(self.n_ma)]
            + [f"log_var({self.name})"]
        )

    def initial(self) -> np.ndarray:
        return np.concatenate(
            [self.init_ar, self.init_ma, [np.log(self.init_sigma2)]]
        ).astype(float)

    def natural(self, x: np.ndarray) -> np.ndarray:
        out = np.array(x, dtype=float)
        out[-1] = np.exp(x[-1])
        return out

    def apply(self, x: np.ndarray, arrays: Dict[str, np.ndarray]):
        ar = x[: self.n_ar]
        ma = x[self.n_ar : self.n_ar + self.n_ma]
        block = _arima_matrices(ar, ma, self.d, float(np.exp(x[-1])), self.stationary)
        s = slice(self.state_offset, self.state_offset + block["T"].shape[0])
        e = self.eta_offset
        arrays["T"][s, s, :] = block["T"][:, :, None]
        arrays["R"][s, e : e + 1, :] = block["R"][:, :, None]
        arrays["Q"][e, e, :] = block["Q"][0, 0]
        arrays["P1"][s, s] = block["P1"]


# Component declarations


@dataclass(frozen=True)
class ComponentSpec:
    """
    Declarative description of one model component

    Matrices are materialized by ``block`` once the number of series and
    time points are known.
    """

    kind: str
    name: str
    params: Dict[str, Any] = field(default_factory=dict)
    index: Optional[Tuple[int, ...]] = None
    type: str = "distinct"

    def block(self, p: int, n: int, series_names: Sequence[str] = ()) -> "Block":
        index = tuple(range(p)) if self.index is None else self.index
        if any(i < 0 or i >= p for i in index):
            raise ModelError(f"component '{self.name}' index {index} outside 0..{p - 1}")
        series = [
            series_names[i] if i < len(series_names) else f"y{i + 1}" for i in index
        ]
        return _MATERIALIZERS[self.kind](self, index, n, series)


@dataclass
class LocalUnknown:
    """Estimable block with indices local to its component"""

    label: str
    size: int
    structure: str
    targets: List[Tuple[str, Tuple[int, ...]]]


@dataclass
class Block:
    """Materialized matrices of one component"""

    name: str
    index: Tuple[int, ...]
    Z: np.ndarray
    T: np.ndarray
    R: np.ndarray
    Q: np.ndarray
    a1: np.ndarray
    P1: np.ndarray
    P1inf: np.ndarray
    state_names: List[str]
    eta_names: List[str]
    unknowns: List[LocalUnknown] = field(default_factory=list)
    arima: Optional[Dict[str, Any]] = None
    z_missing: Optional[np.ndarray] = None

    @property
    def m(self) -> int:
        return self.T.shape[0]

    @property
    def k(self) -> int:
        return self.R.shape[1]


def _index(index) -> Optional[Tuple[int, ...]]:
    if index is None:
        return None
    if isinstance(index, (int, np.integer)):
        return (int(index),)
    return tuple(int(i) for i in index)


def _check_type(type: str):
    if type not in ("distinct", "common"):
        raise ModelError(f"component type must be 'distinct' or 'common', got '{type}'")


def _suffix(names: Sequence[str], series: Sequence[str], distinct: bool) -> List[str]:
    if not distinct or len(series) <= 1:
        return list(names)
    return [f"{name}.{s}" for name in names for s in series]


def _cov_value(value, q: int, label: str, what: str) -> Tuple[np.ndarray, Optional[str]]:
    """Numeric q x q covariance (placeholder identity for markers) and marker"""
    if _is_marker(value):
        return np.eye(q), value
    S = np.array(value, dtype=float)
    if S.ndim == 0:
        S = np.eye(q) * float(S)
    if S.shape != (q, q):
        raise ModelError(f"{label}: {what} must be {q}x{q}, got {S.shape}")
    return S, None


def _unknown(marker: Optional[str], label: str, q: int, targets) -> List[LocalUnknown]:
    if marker is None:
        return []
    structure = "diagonal" if marker == ESTIMATE_DIAGONAL else "full"
    return [LocalUnknown(label, q, structure, list(targets))]


def build_trend(
    degree: int = 1,
    Q: Optional[Sequence[Any]] = None,
    index=None,
    type: str = "distinct",
    name: str = "trend",
) -> ComponentSpec:
    """
    Polynomial trend of the given degree (1 = local level, 2 = local linear)

    Args:
        degree: Number of polynomial levels
        Q: One covariance per level (number, q x q matrix or marker);
            defaults to ESTIMATE for the level and 0 above it
        index: Series the trend loads on (default all)
        type: "distinct" for per-series states, "common" for shared states
        name: Component name
    """
    if degree < 1:
        raise ModelError(f"trend degree must be at least 1, got {degree}")
    _check_type(type)
    if Q is None:
        Q = [ESTIMATE] + [0.0] * (degree - 1)
    Q = list(Q)
    if len(Q) != degree:
        raise ModelError(f"trend of degree {degree} needs {degree} Q blocks, got {len(Q)}")
    return ComponentSpec("trend", name, {"degree": degree, "Q": Q}, _index(index), type)


def _trend_block(spec: ComponentSpec, index, n: int, series) -> Block:
    degree = spec.params["degree"]
    q = len(index) if spec.type == "distinct" else 1
    Tp = np.eye(degree) + np.eye(degree, k=1)
    T = np.kron(Tp, np.eye(q))
    m = degree * q
    Z = np.zeros((len(index), m))
    if spec.type == "distinct":
        Z[:, :q] = np.eye(q)
    else:
        Z[:, 0] = 1.0
    blocks, unknowns = [], []
    level_names = ["level", "slope"] + [f"trend{j + 1}" for j in range(2, degree)]
    for j, value in enumerate(spec.params["Q"]):
        S, marker = _cov_value(value, q, spec.name, f"Q[{j}]")
        blocks.append(S)
        idx = tuple(range(j * q, (j + 1) * q))
        unknowns += _unknown(marker, f"{spec.name}.{level_names[j]}", q, [("Q", idx)])
    names = _suffix(level_names[:degree], series, spec.type == "distinct")
    return Block(
        name=spec.name,
        index=index,
        Z=Z[:, :, None],
        T=T[:, :, None],
        R=np.eye(m)[:, :, None],
        Q=block_diag(*blocks)[:, :, None],
        a1=np.zeros(m),
        P1=np.zeros((m, m)),
        P1inf=np.eye(m),
        state_names=names,
        eta_names=list(names),
        unknowns=unknowns,
    )


def build_seasonal(
    s: int,
    variant: str = "dummy",
    Q=ESTIMATE,
    index=None,
    type: str = "distinct",
    name: str = "seasonal",
) -> ComponentSpec:
    """
    Seasonal component with period s in dummy or trigonometric form

    Both variants have s - 1 states per series. Even periods keep a single
    state for the last harmonic. All harmonic disturbances share Q.
    """
    if s < 2:
        raise ModelError(f"seasonal period must be at least 2, got {s}")
    if variant not in ("dummy", "trig"):
        raise ModelError(f"seasonal variant must be 'dummy' or 'trig', got '{variant}'")
    _check_type(type)
    return ComponentSpec(
        "seasonal", name, {"s": int(s), "variant": variant, "Q": Q}, _index(index), type
    )


def _trig_seasonal_matrix(s: int) -> np.ndarray:
    blocks = []
    for j in range(1, s // 2 + 1):
        lam = 2 * np.pi * j / s
        if s % 2 == 0 and j == s // 2:
            blocks.append(np.array([[np.cos(lam)]]))
        else:
            c, sn = np.cos(lam), np.sin(lam)
            blocks.append(np.array([[c, sn], [-sn, c]]))
    return block_diag(*blocks)


def _seasonal_block(spec: ComponentSpec, index, n: int, series) -> Block:
    s, variant = spec.params["s"], spec.params["variant"]
    q = len(index) if spec.type == "distinct" else 1
    ms = s - 1
    if variant == "dummy":
        Ts = np.zeros((ms, ms))
        Ts[0, :] = -1.0
        Ts[1:, :-1] = np.eye(ms - 1)
        Rs = np.zeros((ms, 1))
        Rs[0, 0] = 1.0
        base_names = [f"sea_dummy{j + 1}" for j in range(ms)]
        eta_base = ["sea_dummy"]
    else:
        Ts = _trig_seasonal_matrix(s)
        Rs = np.eye(ms)
        base_names = []
        for j in range(1, s // 2 + 1):
            base_names.append(f"sea_trig{j}")
            if not (s % 2 == 0 and j == s // 2):
                base_names.append(f"sea_trig*{j}")
        eta_base = list(base_names)
    ks = Rs.shape[1]
    S, marker = _cov_value(spec.params["Q"], q, spec.name, "Q")
    # series-major: states of series a occupy a * ms .. (a + 1) * ms
    T = np.kron(np.eye(q), Ts)
    R = np.kron(np.eye(q), Rs)
    Q = np.kron(S, np.eye(ks))
    Zs = np.zeros((1, ms))
    if variant == "dummy":
        Zs[0, 0] = 1.0
    else:
        Zs[0, :] = [0.0 if "*" in nm else 1.0 for nm in base_names]
    Z = np.zeros((len(index), q * ms))
    for a in range(len(index)):
        col = a if spec.type == "distinct" else 0
        Z[a, col * ms : (col + 1) * ms] = Zs
    targets = [("Q", tuple(a * ks + h for a in range(q))) for h in range(ks)]
    label_series = series if spec.type == "distinct" else ["common"]
    return Block(
        name=spec.name,
        index=index,
        Z=Z[:, :, None],
        T=T[:, :, None],
        R=R[:, :, None],
        Q=Q[:, :, None],
        a1=np.zeros(q * ms),
        P1=np.zeros((q * ms, q * ms)),
        P1inf=np.eye(q * ms),
        state_names=_series_major(base_names, label_series, q),
        eta_names=_series_major(eta_base, label_series, q),
        unknowns=_unknown(marker, spec.name, q, targets),
    )


def _series_major(names: Sequence[str], series: Sequence[str], q: int) -> List[str]:
    if q <= 1:
        return list(names)
    return [f"{name}.{s}" for s in series for name in names]


def build_cycle(
    s: float, Q=ESTIMATE, index=None, type: str = "distinct", name: str = "cycle"
) -> ComponentSpec:
    """Stochastic cycle with period s > 2; both disturbances have variance Q"""
    if s <= 2:
        raise ModelError(f"cycle period must exceed 2, got {s}")
    _check_type(type)
    return ComponentSpec("cycle", name, {"s": float(s), "Q": Q}, _index(index), type)


def _cycle_block(spec: ComponentSpec, index, n: int, series) -> Block:
    lam = 2 * np.pi / spec.params["s"]
    c, sn = np.cos(lam), np.sin(lam)
    Tc = np.array([[c, sn], [-sn, c]])
    q = len(index) if spec.type == "distinct" else 1
    S, marker = _cov_value(spec.params["Q"], q, spec.name, "Q")
    Z = np.zeros((len(index), 2 * q))
    for a in range(len(index)):
        col = a if spec.type == "distinct" else 0
        Z[a, 2 * col] = 1.0
    targets = [("Q", tuple(2 * a + h for a in range(q))) for h in range(2)]
    label_series = series if spec.type == "distinct" else ["common"]
    names = _series_major(["cycle", "cycle*"], label_series, q)
    return Block(
        name=spec.name,
        index=index,
        Z=Z[:, :, None],
        T=np.kron(np.eye(q), Tc)[:, :, None],
        R=np.eye(2 * q)[:, :, None],
        Q=np.kron(S, np.eye(2))[:, :, None],
        a1=np.zeros(2 * q),
        P1=np.zeros((2 * q, 2 * q)),
        P1inf=np.eye(2 * q),
        state_names=names,
        eta_names=list(names),
        unknowns=_unknown(marker, spec.name, q, targets),
    )


def stationary_covariance(T: np.ndarray, RQR: np.ndarray) -> np.ndarray:
    """Solve (I - T kron T) vec(S) = vec(R Q R')"""
    r = T.shape[0]
    A = np.eye(r * r) - np.kron(T, T)
    try:
        vec = np.linalg.solve(A, RQR.reshape(-1))
    except np.linalg.LinAlgError as e:
        raise NumericError(f"stationary covariance system is singular: {e}") from e
    S = vec.reshape(r, r)
    return (S + S.T) / 2


def _arima_matrices(
    ar: Sequence[float], ma: Sequence[float], d: int, sigma2: float, stationary: bool
) -> Dict[str, np.ndarray]:
    ar = np.asarray(ar, dtype=float)
    ma = np.asarray(ma, dtype=float)
    r = max(ar.size, ma.size + 1)
    m = d + r
    Tr = np.zeros((r, r))
    Tr[: ar.size, 0] = ar
    Tr[: r - 1, 1:] = np.eye(r - 1)
    Rr = np.zeros((r, 1))
    Rr[0, 0] = 1.0
    Rr[1 : ma.size + 1, 0] = ma

    if ar.size and stationary:
        companion = np.zeros((ar.size, ar.size))
        companion[0, :] = ar
        companion[1:, :-1] = np.eye(ar.size - 1)
        if np.max(np.abs(np.linalg.eigvals(companion))) >= 1:
            raise EstimationError(f"AR coefficients {ar.tolist()} are not stationary")

    T = np.zeros((m, m))
    T[:d, :d] = np.triu(np.ones((d, d)))
    T[:d, d] = 1.0
    T[d:, d:] = Tr
    R = np.vstack([np.zeros((d, 1)), Rr])
    Z = np.zeros((1, m))
    Z[0, : d + 1] = 1.0
    P1 = np.zeros((m, m))
    P1inf = np.diag(np.r_[np.ones(d), np.zeros(r)])
    if stationary:
        P1[d:, d:] = stationary_covariance(Tr, Rr @ Rr.T * sigma2)
    else:
        P1inf = np.eye(m)
    return {"Z": Z, "T": T, "R": R, "Q": np.array([[sigma2]]), "P1": P1, "P1inf": P1inf}


def build_arima(
    ar: Sequence[float] = (),
    ma: Sequence[float] = (),
    d: int = 0,
    sigma2: Union[float, str] = 1.0,
    stationary: bool = True,
    estimate: bool = False,
    index=None,
    name: str = "arima",
) -> ComponentSpec:
    """
    ARIMA(p, d, q) component with stationary initial distribution

    Args:
        ar: AR coefficients (initial values when estimated)
        ma: MA coefficients (initial values when estimated)
        d: Order of differencing (differenced states are diffuse)
        sigma2: Innovation variance, or ESTIMATE
        stationary: If False the whole block is diffuse
        estimate: Estimate ar, ma and sigma2
        index: Single series the component loads on
        name: Component name
    """
    if d < 0:
        raise ModelError(f"differencing order must be nonnegative, got {d}")
    estimate = estimate or _is_marker(sigma2)
    sigma2_value = 1.0 if _is_marker(sigma2) else float(sigma2)
    # validates stationarity and the covariance solve up front
    _arima_matrices(ar, ma, d, sigma2_value, stationary)
    params = {
        "ar": tuple(float(x) for x in ar),
        "ma": tuple(float(x) for x in ma),
        "d": int(d),
        "sigma2": None if _is_marker(sigma2) else sigma2_value,
        "stationary": bool(stationary),
        "estimate": bool(estimate),
    }
    return ComponentSpec("arima", name, params, _index(index), "common")


def _arima_block(spec: ComponentSpec, index, n: int, series) -> Block:
    prm = spec.params
    sigma2 = 1.0 if prm["sigma2"] is None else prm["sigma2"]
    mats = _arima_matrices(prm["ar"], prm["ma"], prm["d"], sigma2, prm["stationary"])
    m = mats["T"].shape[0]
    Z = np.repeat(mats["Z"], len(index), axis=0)
    names = [f"{spec.name}{j + 1}" for j in range(m)]
    return Block(
        name=spec.name,
        index=index,
        Z=Z[:, :, None],
        T=mats["T"][:, :, None],
        R=mats["R"][:, :, None],
        Q=mats["Q"][:, :, None],
        a1=np.zeros(m),
        P1=mats["P1"],
        P1inf=mats["P1inf"],
        state_names=names,
        eta_names=[spec.name],
        arima=prm if prm["estimate"] else None,
    )


def build_regression(
    X,
    index=None,
    type: str = "distinct",
    Q=None,
    P1=None,
    names: Optional[Sequence[str]] = None,
    name: str = "regression",
) -> ComponentSpec:
    """
    Regression on covariates, Z_t = x_t'

    Args:
        X: n x q design matrix (NaN allowed only where the series is missing)
        index: Series the coefficients load on
        type: "distinct" for per-series coefficients, "common" for shared ones
        Q: None for static coefficients; otherwise their random walk covariance
        P1: None for diffuse (fixed) coefficients; a covariance or ESTIMATE
            for proper (random effect) coefficients
        names: Coefficient names
        name: Component name
    """
    _check_type(type)
    X = np.array(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ModelError("regression design must be a matrix")
    names = list(names) if names is not None else [f"x{j + 1}" for j in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise ModelError(f"{len(names)} coefficient names for {X.shape[1]} columns")
    params = {"X": X, "Q": Q, "P1": P1, "names": names}
    return ComponentSpec("regression", name, params, _index(index), type)


def _regression_block(spec: ComponentSpec, index, n: int, series) -> Block:
    X = spec.params["X"]
    if X.shape[0] != n:
        raise ModelError(
            f"regression '{spec.name}' design has {X.shape[0]} rows for {n} time points"
        )
    qx = X.shape[1]
    distinct = spec.type == "distinct"
    q = len(index) if distinct else 1
    m = qx * q
    missing = np.isnan(X).any(axis=1)
    Xz = np.nan_to_num(X)
    Z = np.zeros((len(index), m, n))
    for a in range(len(index)):
        col = a if distinct else 0
        Z[a, col * qx : (col + 1) * qx, :] = Xz.T
    label_series = series if distinct else ["common"]
    state_names = _series_major(spec.params["names"], label_series, q)

    unknowns: List[LocalUnknown] = []
    Qv = spec.params["Q"]
    if Qv is None:
        R = np.zeros((m, 0))
        Q = np.zeros((0, 0))
        eta_names: List[str] = []
    else:
        S, marker = _cov_value(Qv, qx, spec.name, "Q")
        R = np.eye(m)
        Q = np.kron(np.eye(q), S)
        eta_names = list(state_names)
        targets = [("Q", tuple(range(a * qx, (a + 1) * qx))) for a in range(q)]
        unknowns += _unknown(marker, f"{spec.name}.Q", qx, targets)

    P1v = spec.params["P1"]
    if P1v is None:
        P1 = np.zeros((m, m))
        P1inf = np.eye(m)
    else:
        S, marker = _cov_value(P1v, qx, spec.name, "P1")
        P1 = np.kron(np.eye(q), S)
        P1inf = np.zeros((m, m))
        targets = [("P1", tuple(range(a * qx, (a + 1) * qx))) for a in range(q)]
        unknowns += _unknown(marker, f"{spec.name}.P1", qx, targets)

    return Block(
        name=spec.name,
        index=index,
        Z=Z,
        T=np.eye(m)[:, :, None],
        R=R[:, :, None],
        Q=Q[:, :, None],
        a1=np.zeros(m),
        P1=P1,
        P1inf=P1inf,
        state_names=state_names,
        eta_names=eta_names,
        unknowns=unknowns,
        z_missing=missing,
    )


def build_custom(
    Z,
    T,
    R=None,
    Q=None,
    a1=None,
    P1=None,
    P1inf=None,
    index=None,
    state_names: Optional[Sequence[str]] = None,
    name: str = "custom",
) -> ComponentSpec:
    """
    Component given by its own system matrices

    Q may be ESTIMATE/ESTIMATE_DIAGONAL; P1 may additionally be "Q", which
    ties it to the estimated Q (requires R = I). Defaults: R = I, a1 = 0,
    P1 = 0, P1inf = 0.
    """
    T = np.array(T, dtype=float)
    if T.ndim < 2:
        T = T.reshape(1, 1)
    mc = T.shape[0]
    params = {
        "Z": np.array(Z, dtype=float),
        "T": T,
        "R": np.eye(mc) if R is None else np.array(R, dtype=float),
        "Q": np.zeros((mc, mc)) if Q is None else Q,
        "a1": np.zeros(mc) if a1 is None else np.array(a1, dtype=float).reshape(-1),
        "P1": np.zeros((mc, mc)) if P1 is None else P1,
        "P1inf": np.zeros((mc, mc)) if P1inf is None else np.array(P1inf, dtype=float),
        "state_names": list(state_names) if state_names is not None else None,
    }
    return ComponentSpec("custom", name, params, _index(index), "distinct")


def _custom_block(spec: ComponentSpec, index, n: int, series) -> Block:
    prm = spec.params
    T = _as_cube(prm["T"], "custom T")
    mc = T.shape[0]
    Z = _as_cube(prm["Z"], "custom Z", row_vector=True)
    if Z.shape[0] == 1 and len(index) > 1:
        Z = np.repeat(Z, len(index), axis=0)
    if Z.shape[:2] != (len(index), mc):
        raise ModelError(f"custom '{spec.name}' Z must be {len(index)}x{mc}, got {Z.shape[:2]}")
    R = _as_cube(prm["R"], "custom R")
    kc = R.shape[1]
    Qv = prm["Q"]
    S, q_marker = _cov_value(Qv, kc, spec.name, "Q")
    unknowns = _unknown(q_marker, spec.name, kc, [("Q", tuple(range(kc)))])

    P1v = prm["P1"]
    if isinstance(P1v, str) and P1v == TIE_TO_Q:
        if kc != mc:
            raise ModelError(f"custom '{spec.name}': P1 tied to Q needs R = I")
        P1 = S.copy()
        if unknowns:
            unknowns[0].targets.append(("P1", tuple(range(mc))))
    else:
        P1, p_marker = _cov_value(P1v, mc, spec.name, "P1")
        unknowns += _unknown(p_marker, f"{spec.name}.P1", mc, [("P1", tuple(range(mc)))])
    names = prm["state_names"] or (
        [spec.name] if mc == 1 else [f"{spec.name}{j + 1}" for j in range(mc)]
    )
    eta = [spec.name] if kc == 1 else [f"{spec.name}.eta{j + 1}" for j in range(kc)]
    return Block(
        name=spec.name,
        index=index,
        Z=Z,
        T=T,
        R=R,
        Q=S[:, :, None],
        a1=prm["a1"],
        P1=P1,
        P1inf=np.array(prm["P1inf"], dtype=float).reshape(mc, mc),
        state_names=list(names),
        eta_names=eta,
        unknowns=unknowns,
    )


_MATERIALIZERS = {
    "trend": _trend_block,
    "seasonal": _seasonal_block,
    "cycle": _cycle_block,
    "arima": _arima_block,
    "regression": _regression_block,
    "custom": _custom_block,
}


# Assembly


@dataclass(eq=False)
class AssembledModel:
    """
    Model assembled from components, with the bookkeeping needed to fit it

    Attributes:
        model: Assembled StateSpaceModel (unknowns at their initial values)
        components: Component name -> (start, stop) state range
        eta_ranges: Component name -> (start, stop) disturbance range
        unknowns: Estimable blocks in parameter order
    """

    model: StateSpaceModel
    components: Dict[str, Tuple[int, int]]
    eta_ranges: Dict[str, Tuple[int, int]]
    unknowns: List[Any]

    @property
    def parameter_names(self) -> List[str]:
        return [name for u in self.unknowns for name in u.parameter_names]

    @property
    def n_params(self) -> int:
        return sum(u.n_params for u in self.unknowns)

    def initial_parameters(self) -> np.ndarray:
        if not self.unknowns:
            return np.zeros(0)
        return np.concatenate([u.initial() for u in self.unknowns])

    def _split(self, x: np.ndarray) -> List[np.ndarray]:
        x = np.asarray(x, dtype=float)
        if x.size != self.n_params:
            raise ModelError(f"expected {self.n_params} parameters, got {x.size}")
        out, start = [], 0
        for u in self.unknowns:
            out.append(x[start : start + u.n_params])
            start += u.n_params
        return out

    def update(self, x: np.ndarray, model: Optional[StateSpaceModel] = None) -> StateSpaceModel:
        """Write parameter vector x into the model's matrices"""
        model = self.model if model is None else model
        arrays = {
            name: np.array(getattr(model, name), dtype=float)
            for name in ("H", "T", "R", "Q", "P1")
        }
        for unknown, xs in zip(self.unknowns, self._split(x)):
            unknown.apply(xs, arrays)
        return model.replace(**arrays)

    def natural_parameters(self, x: np.ndarray) -> Dict[str, float]:
        """Parameter values on the variance / coefficient scale by name"""
        out: Dict[str, float] = {}
        for unknown, xs in zip(self.unknowns, self._split(x)):
            for name, value in zip(unknown.parameter_names, unknown.natural(xs)):
                out[name] = float(value)
        return out

    def states(self, name: str) -> slice:
        if name not in self.components:
            raise ModelError(
                f"unknown component '{name}', expected one of {list(self.components)}"
            )
        start, stop = self.components[name]
        return slice(start, stop)


def _initial_variance(y: np.ndarray, distribution: Sequence[str]) -> float:
    gauss = [i for i, d in enumerate(distribution) if d == "gaussian"]
    if gauss:
        diffs = np.diff(y[:, gauss], axis=0)
        var = np.nanvar(diffs) if np.any(~np.isnan(diffs)) else np.nan
        if np.isfinite(var) and var > 0:
            return float(var / 2)
        return 1.0
    return 0.1


def assemble(
    components: Sequence[ComponentSpec],
    y,
    distribution: Optional[Sequence[str]] = None,
    u=None,
    H=None,
    tol: Optional[float] = None,
    series_names: Optional[Sequence[str]] = None,
    init_variance: Optional[float] = None,
    strict: bool = True,
) -> AssembledModel:
    """
    Combine components block-diagonally into one model

    Args:
        components: Component declarations
        y: n x p observations (NaN for missing)
        distribution: One distribution per series (default gaussian)
        u: n x p exposure/size/shape/dispersion values
        H: Observation covariance (number, p x p, (p, p, n) or marker);
            restricted to gaussian series
        tol: Diffuse zero tolerance
        series_names: Series labels used in state names
        init_variance: Starting value for estimated variances
        strict: Raise ModelError when the assembled model is invalid

    Returns:
        AssembledModel whose model passes validate
    """
    if not components:
        raise ModelError("at least one component is required")
    y = np.array(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    n, p = y.shape
    distribution = tuple(distribution) if distribution is not None else ("gaussian",) * p
    if len(distribution) != p:
        raise ModelError(f"{len(distribution)} distributions for {p} series")
    series_names = tuple(series_names) if series_names is not None else tuple(
        f"y{i + 1}" if p > 1 else "y" for i in range(p)
    )
    init = _initial_variance(y, distribution) if init_variance is None else init_variance

    names = [c.name for c in components]
    if len(set(names)) != len(names):
        raise ModelError(f"duplicate component names in {names}")

    blocks = [c.block(p, n, series_names) for c in components]

    observed = ~np.isnan(y)
    for block in blocks:
        if block.z_missing is not None:
            clash = block.z_missing & observed[:, list(block.index)].any(axis=1)
            if clash.any():
                t = int(np.flatnonzero(clash)[0])
                raise ModelError(
                    f"regression '{block.name}' has missing covariates at observed time {t}"
                )

    m = sum(b.m for b in blocks)
    k = sum(b.k for b in blocks)
    tv_z = any(b.Z.shape[2] > 1 for b in blocks)
    Z = np.zeros((p, m, n if tv_z else 1))
    components_ranges: Dict[str, Tuple[int, int]] = {}
    eta_ranges: Dict[str, Tuple[int, int]] = {}
    unknowns: List[Any] = []

    H_unknown = None
    gauss = [i for i, d in enumerate(distribution) if d == "gaussian"]
    if H is None:
        H = ESTIMATE_DIAGONAL if gauss else 0.0
    if _is_marker(H):
        Hm = np.zeros((p, p, 1))
        if gauss:
            structure = "diagonal" if H == ESTIMATE_DIAGONAL or len(gauss) == 1 else "full"
            H_unknown = CovarianceBlock("H", len(gauss), structure, (("H", tuple(gauss)),), init)
    else:
        Hm = np.array(H, dtype=float)
        if Hm.ndim == 0:
            Hm = np.diag([float(Hm) if d == "gaussian" else 0.0 for d in distribution])
        if Hm.ndim == 2:
            Hm = Hm[:, :, None]
        Hm = Hm.copy()
    if H_unknown is not None:
        unknowns.append(H_unknown)

    offset, eoffset = 0, 0
    T_parts, R_parts, Q_parts, P1_parts, P1inf_parts = [], [], [], [], []
    tv = {"T": False, "R": False, "Q": False}
    for block in blocks:
        for name in tv:
            tv[name] |= getattr(block, name).shape[2] > 1
    state_names: List[str] = []
    eta_names: List[str] = []
    for block in blocks:
        rows = list(block.index)
        Z[np.ix_(rows, np.arange(offset, offset + block.m))] = (
            block.Z if block.Z.shape[2] == Z.shape[2] else np.repeat(block.Z, n, axis=2)
        )
        components_ranges[block.name] = (offset, offset + block.m)
        eta_ranges[block.name] = (eoffset, eoffset + block.k)
        for local in block.unknowns:
            targets = []
            for matrix, idx in local.targets:
                shift = eoffset if matrix == "Q" else offset
                targets.append((matrix, tuple(i + shift for i in idx)))
            unknowns.append(
                CovarianceBlock(local.label, local.size, local.structure, tuple(targets), init)
            )
        if block.arima is not None:
            prm = block.arima
            unknowns.append(
                ArimaBlock(
                    name=block.name,
                    n_ar=len(prm["ar"]),
                    n_ma=len(prm["ma"]),
                    d=prm["d"],
                    stationary=prm["stationary"],
                    state_offset=offset,
                    eta_offset=eoffset,
                    init_ar=prm["ar"],
                    init_ma=prm["ma"],
                    init_sigma2=init if prm["sigma2"] is None else prm["sigma2"],
                )
            )
        T_parts.append(block.T)
        R_parts.append(block.R)
        Q_parts.append(block.Q)
        P1_parts.append(block.P1)
        P1inf_parts.append(block.P1inf)
        state_names += block.state_names
        eta_names += block.eta_names
        offset += block.m
        eoffset += block.k

    if len(set(state_names)) != len(state_names):
        dupes = sorted({s for s in state_names if state_names.count(s) > 1})
        raise ModelError(f"duplicate state names {dupes}")

    def stack(parts, slices):
        out = []
        for s in range(slices):
            out.append(block_diag(*[part[:, :, min(s, part.shape[2] - 1)] for part in parts]))
        return np.stack(out, axis=2)

    model = StateSpaceModel(
        y=y,
        Z=Z,
        H=Hm,
        T=stack(T_parts, n if tv["T"] else 1),
        R=stack(R_parts, n if tv["R"] else 1),
        Q=stack(Q_parts, n if tv["Q"] else 1),
        a1=np.concatenate([b.a1 for b in blocks]),
        P1=block_diag(*P1_parts),
        P1inf=block_diag(*P1inf_parts),
        u=u,
        distribution=distribution,
        tol=tol,
        state_names=tuple(state_names),
        eta_names=tuple(eta_names),
        series_names=series_names,
    )
    assembled = AssembledModel(model, components_ranges, eta_ranges, unknowns)
    if unknowns:
        assembled.model = assembled.update(assembled.initial_parameters())
    violations = validate(assembled.model)
    if violations and strict:
        raise ModelError("; ".join(str(v) for v in violations))
    logger.debug(
        f"Assembled {len(blocks)} components: m={m}, k={k}, "
        f"{assembled.n_params} parameters"
    )
    return assembled
