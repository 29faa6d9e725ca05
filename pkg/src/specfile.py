"""
Model specification files for the command line
A YAML (or JSON) document binds CSV columns to series, exposures and
covariates and lists the model components
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import yaml

from .builders import (
    KINDS,
    AssembledModel,
    ComponentSpec,
    assemble,
    build_arima,
    build_custom,
    build_cycle,
    build_regression,
    build_seasonal,
    build_trend,
)
from .errors import SpecError
from .model import DISTRIBUTIONS, SYSTEM_MATRICES, Violation, validate

NA_VALUES = ["NA", ""]

logger = logging.getLogger("Main")


@dataclass(frozen=True)
class ModelSpec:
    """
    Parsed specification file

    Attributes:
        path: Location of the file; data paths are relative to it
        data: CSV path, series, exposure and time column bindings
        distribution: One distribution per series
        H: Observation covariance or marker
        components: Component entries in declaration order
        fit: Fit options (optimizer, nsim, seed, starts, maxiter, two_stage,
            parameters)
        horizon: Default horizon bindings (path)
    """

    path: Path
    data: Dict[str, Any]
    distribution: tuple
    H: Any
    components: List[Dict[str, Any]]
    fit: Dict[str, Any] = field(default_factory=dict)
    horizon: Dict[str, Any] = field(default_factory=dict)

    @property
    def series(self) -> List[str]:
        return list(self.data["series"])

    def resolve(self, relative: str) -> Path:
        path = Path(relative)
        return path if path.is_absolute() else self.path.parent / path


def _as_list(value) -> list:
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        return list(value)
    return [value]


def load_spec(path) -> ModelSpec:
    """Read and structurally check a specification file"""
    path = Path(path)
    if not path.exists():
        raise SpecError(f"spec file not found: {path}", code="file-not-found")
    try:
        with open(path, "r") as f:
            doc = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise SpecError(f"cannot parse {path}: {e}", code="spec-parse-error") from e
    if not isinstance(doc, dict):
        raise SpecError(f"{path} does not contain a mapping", code="spec-parse-error")

    data = doc.get("data")
    if not isinstance(data, dict) or "path" not in data or "series" not in data:
        raise SpecError("'data' needs 'path' and 'series'", code="missing-field")
    data = dict(data)
    data["series"] = _as_list(data["series"])
    if "exposure" in data:
        data["exposure"] = _as_list(data["exposure"])

    components = doc.get("components")
    if not components or not isinstance(components, list):
        raise SpecError("'components' must be a non-empty list", code="missing-field")

    distribution = _as_list(doc.get("distribution", "gaussian"))
    if len(distribution) == 1:
        distribution = distribution * len(data["series"])

    return ModelSpec(
        path=path,
        data=data,
        distribution=tuple(distribution),
        H=doc.get("H"),
        components=[dict(c) for c in components],
        fit=dict(doc.get("fit") or {}),
        horizon=dict(doc.get("horizon") or {}),
    )


def read_frame(spec: ModelSpec) -> pd.DataFrame:
    """Load the data CSV named by the spec"""
    path = spec.resolve(spec.data["path"])
    if not path.exists():
        raise SpecError(f"data file not found: {path}", code="file-not-found")
    return pd.read_csv(path, na_values=NA_VALUES, keep_default_na=True)


def read_horizon(spec: ModelSpec, path=None) -> pd.DataFrame:
    """Load future covariates/exposures from path or the spec's horizon entry"""
    path = Path(path) if path is not None else None
    if path is None and spec.horizon.get("path"):
        path = spec.resolve(spec.horizon["path"])
    if path is None:
        raise SpecError("no horizon file given", code="missing-field")
    if not path.exists():
        raise SpecError(f"horizon file not found: {path}", code="file-not-found")
    return pd.read_csv(path, na_values=NA_VALUES, keep_default_na=True)


def _component_columns(entry: Dict[str, Any]) -> List[str]:
    return _as_list(entry.get("covariates")) + _as_list(entry.get("factors"))


def spec_violations(spec: ModelSpec, frame: pd.DataFrame) -> List[Violation]:
    """Check column bindings, names, kinds and seeds against the data"""
    violations: List[Violation] = []
    columns = set(frame.columns)

    wanted = list(spec.series)
    wanted += [c for c in spec.data.get("exposure", []) if isinstance(c, str)]
    if spec.data.get("time"):
        wanted.append(spec.data["time"])
    for entry in spec.components:
        wanted += _component_columns(entry)
    for column in wanted:
        if column not in columns:
            violations.append(
                Violation("column-not-found", f"column '{column}' is not in the data")
            )

    if len(spec.distribution) != len(spec.series):
        violations.append(
            Violation(
                "dimension-mismatch",
                f"{len(spec.distribution)} distributions for {len(spec.series)} series",
            )
        )
    for dist in spec.distribution:
        if dist not in DISTRIBUTIONS:
            violations.append(
                Violation("unknown-distribution", f"unknown distribution '{dist}'")
            )
    exposure = spec.data.get("exposure", [])
    if exposure and len(exposure) != len(spec.series):
        violations.append(
            Violation(
                "dimension-mismatch",
                f"{len(exposure)} exposures for {len(spec.series)} series",
            )
        )

    names = [entry.get("name", entry.get("kind")) for entry in spec.components]
    for name in sorted({n for n in names if names.count(n) > 1}):
        violations.append(
            Violation("duplicate-name", f"component name '{name}' is used more than once")
        )
    for entry in spec.components:
        if entry.get("kind") not in KINDS:
            violations.append(
                Violation(
                    "unknown-kind",
                    f"unknown component kind '{entry.get('kind')}', expected one of {KINDS}",
                )
            )

    if int(spec.fit.get("nsim", 0) or 0) > 0 and spec.fit.get("seed") is None:
        violations.append(
            Violation("seed-missing", "fit.nsim > 0 requires fit.seed for reproducibility")
        )
    return violations


def _series_index(value, series: Sequence[str]) -> Optional[List[int]]:
    if value is None:
        return None
    out = []
    for item in _as_list(value):
        if isinstance(item, str):
            if item not in series:
                raise SpecError(f"unknown series '{item}'", code="column-not-found")
            out.append(series.index(item))
        else:
            out.append(int(item))
    return out


def regression_design(entry: Dict[str, Any], frame: pd.DataFrame) -> pd.DataFrame:
    """Numeric covariates plus dummy encoded factors (first level dropped)"""
    parts = []
    if entry.get("intercept", False):
        parts.append(pd.DataFrame({"(Intercept)": np.ones(len(frame))}, index=frame.index))
    covariates = _as_list(entry.get("covariates"))
    if covariates:
        parts.append(frame[covariates].astype(float))
    factors = _as_list(entry.get("factors"))
    if factors:
        levels = frame[factors].astype("category")
        dummies = pd.get_dummies(levels, prefix=factors, drop_first=True, dtype=float)
        missing = levels.isna().any(axis=1)
        dummies.loc[missing, :] = np.nan
        parts.append(dummies)
    if not parts:
        raise SpecError("regression needs covariates, factors or an intercept", code="missing-field")
    return pd.concat(parts, axis=1)


def _component(
    entry: Dict[str, Any], frame: pd.DataFrame, series: Sequence[str], rows: int
) -> ComponentSpec:
    kind = entry["kind"]
    name = entry.get("name", kind)
    index = _series_index(entry.get("index"), series)
    type = entry.get("type", "distinct")
    if kind == "trend":
        return build_trend(entry.get("degree", 1), entry.get("Q"), index, type, name)
    if kind == "seasonal":
        return build_seasonal(
            entry["period"], entry.get("variant", "dummy"), entry.get("Q", "estimate"),
            index, type, name,
        )
    if kind == "cycle":
        return build_cycle(entry["period"], entry.get("Q", "estimate"), index, type, name)
    if kind == "arima":
        return build_arima(
            ar=entry.get("ar", []),
            ma=entry.get("ma", []),
            d=entry.get("d", 0),
            sigma2=entry.get("sigma2", 1.0),
            stationary=entry.get("stationary", True),
            estimate=entry.get("estimate", False),
            index=index,
            name=name,
        )
    if kind == "regression":
        X = regression_design(entry, frame).iloc[:rows]
        return build_regression(
            X.to_numpy(), index, type, entry.get("Q"), entry.get("P1"), list(X.columns), name
        )
    return build_custom(
        entry["Z"],
        entry["T"],
        entry.get("R"),
        entry.get("Q"),
        entry.get("a1"),
        entry.get("P1"),
        entry.get("P1inf"),
        index,
        entry.get("state_names"),
        name,
    )


def _assemble(spec: ModelSpec, frame: pd.DataFrame, y: np.ndarray, strict: bool) -> AssembledModel:
    series = spec.series
    rows = y.shape[0]
    components = [_component(entry, frame, series, rows) for entry in spec.components]
    u = None
    exposure = spec.data.get("exposure", [])
    if exposure:
        u = np.column_stack(
            [
                frame[e].to_numpy(dtype=float)[:rows] if isinstance(e, str) else np.full(rows, float(e))
                for e in exposure
            ]
        )
    return assemble(
        components,
        y,
        distribution=spec.distribution,
        u=u,
        H=spec.H,
        series_names=series,
        strict=strict,
    )


@dataclass(eq=False)
class BuiltModel:
    """A spec bound to its data, optionally with a future horizon"""

    spec: ModelSpec
    assembled: AssembledModel
    times: np.ndarray
    future: Optional[AssembledModel] = None
    future_times: Optional[np.ndarray] = None

    @property
    def horizon(self) -> int:
        return 0 if self.future is None else self.future.model.n - self.assembled.model.n

    def newdata(self, x: np.ndarray) -> Dict[str, np.ndarray]:
        """Future system matrices and u at parameters x"""
        if self.future is None:
            raise SpecError("no horizon was loaded", code="missing-field")
        n = self.assembled.model.n
        full = self.future.update(x) if self.future.unknowns else self.future.model
        out: Dict[str, np.ndarray] = {"u": full.u[n:]}
        for name in SYSTEM_MATRICES:
            arr = getattr(full, name)
            if arr.shape[2] > 1:
                out[name] = arr[:, :, n : n + self.horizon]
        return out


def build_model(
    spec: ModelSpec,
    frame: pd.DataFrame,
    horizon: Optional[pd.DataFrame] = None,
    strict: bool = True,
) -> BuiltModel:
    """
    Assemble the model of a spec on its data

    Args:
        spec: Parsed spec
        frame: Data rows
        horizon: Optional future rows (series columns are ignored)
        strict: Raise on model violations instead of returning the model

    Returns:
        BuiltModel; with a horizon, factor levels are encoded over past and
        future rows together
    """
    violations = spec_violations(spec, frame)
    if violations:
        first = violations[0]
        raise SpecError("; ".join(str(v) for v in violations), code=first.code)
    time_col = spec.data.get("time")
    times = frame[time_col].to_numpy() if time_col else np.arange(1, len(frame) + 1)

    y = frame[spec.series].to_numpy(dtype=float)
    future = future_times = None
    if horizon is not None:
        needed = [c for e in spec.components for c in _component_columns(e)]
        needed += [c for c in spec.data.get("exposure", []) if isinstance(c, str)]
        for column in needed:
            if column not in horizon.columns:
                raise SpecError(
                    f"horizon file lacks column '{column}'", code="column-not-found"
                )
        combined = pd.concat([frame, horizon], ignore_index=True)
        y_full = np.vstack([y, np.full((len(horizon), len(spec.series)), np.nan)])
        future = _assemble(spec, combined, y_full, strict=True)
        past = _assemble(spec, combined, y, strict)
        if time_col and time_col in horizon.columns:
            future_times = horizon[time_col].to_numpy()
        else:
            future_times = np.arange(len(frame) + 1, len(frame) + len(horizon) + 1)
    else:
        past = _assemble(spec, frame, y, strict)
    logger.debug(
        f"Built model from {spec.path.name}: n={past.model.n}, p={past.model.p}, "
        f"m={past.model.m}, {past.n_params} parameters"
    )
    return BuiltModel(spec, past, times, future, future_times)


def model_violations(built: BuiltModel) -> List[Violation]:
    return validate(built.assembled.model)


def read_parameters(path, names: Sequence[str]) -> np.ndarray:
    """
    Read fixed parameters written by the fit command

    The file needs columns name and estimate; every parameter name of the
    model must appear.
    """
    path = Path(path)
    if not path.exists():
        raise SpecError(f"parameter file not found: {path}", code="file-not-found")
    table = pd.read_csv(path)
    if not {"name", "estimate"} <= set(table.columns):
        raise SpecError(f"{path} needs columns name and estimate", code="column-not-found")
    values = dict(zip(table["name"], table["estimate"].astype(float)))
    missing = [n for n in names if n not in values]
    if missing:
        raise SpecError(f"parameters {missing} are missing from {path}", code="column-not-found")
    return np.array([values[n] for n in names], dtype=float)


def check_seed(nsim: int, seed) -> None:
    """Simulation based commands need a seed to be reproducible"""
    if nsim > 0 and seed is None:
        raise SpecError("--nsim > 0 requires a seed (--seed or fit.seed)", code="seed-missing")


def horizon_model(built: BuiltModel, x: np.ndarray):
    """Fitted model and the newdata for its horizon"""
    model = built.assembled.update(x) if built.assembled.unknowns else built.assembled.model
    if built.future is None:
        return model, None
    return model, built.newdata(x)

