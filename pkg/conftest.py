"""
Shared fixtures for the ssmkit test suite
"""

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from src.model import StateSpaceModel

DATASETS = Path(__file__).parent / "src" / "datasets"


@pytest.fixture
def local_level():
    """Two observations of a diffuse local level with unit variances"""
    return StateSpaceModel(
        y=[1.0, 0.5], Z=1.0, H=1.0, T=1.0, R=1.0, Q=1.0, a1=0.0, P1=0.0, P1inf=1.0
    )


@pytest.fixture
def counts_path():
    return DATASETS / "counts.yaml"


@pytest.fixture
def counts_frame():
    return pd.read_csv(DATASETS / "counts.csv")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_proper_model(seed: int, n: int = 15, p: int = 2, m: int = 3, k: int = 2):
    """Proper prior model with correlated observation noise and gaps"""
    gen = np.random.default_rng(seed)
    A = gen.standard_normal((p, p))
    B = gen.standard_normal((k, k))
    y = gen.standard_normal((n, p))
    y[gen.random((n, p)) < 0.2] = np.nan
    y[3] = np.nan
    return StateSpaceModel(
        y=y,
        Z=gen.standard_normal((p, m)),
        H=A @ A.T + 0.2 * np.eye(p),
        T=0.9 * np.linalg.qr(gen.standard_normal((m, m)))[0],
        R=gen.standard_normal((m, k)),
        Q=B @ B.T + 0.1 * np.eye(k),
        a1=gen.standard_normal(m),
        P1=np.eye(m) * 2.0,
        P1inf=np.zeros((m, m)),
    )


def random_walk_data(n: int, seed: int, H: float = 1.0, Q: float = 0.5) -> np.ndarray:
    """Observations of a local level model"""
    gen = np.random.default_rng(seed)
    level = np.cumsum(np.sqrt(Q) * gen.standard_normal(n))
    return level + np.sqrt(H) * gen.standard_normal(n)


def glm_poisson(X: np.ndarray, y: np.ndarray, iterations: int = 100):
    """Poisson regression by iteratively reweighted least squares"""
    beta = np.zeros(X.shape[1])
    beta[0] = np.log(y.mean())
    for _ in range(iterations):
        eta = X @ beta
        mu = np.exp(eta)
        z = eta + (y - mu) / mu
        XtW = X.T * mu
        new = np.linalg.solve(XtW @ X, XtW @ z)
        if np.max(np.abs(new - beta)) < 1e-13:
            beta = new
            break
        beta = new
    mu = np.exp(X @ beta)
    cov = np.linalg.inv((X.T * mu) @ X)
    return beta, np.sqrt(np.diag(cov))


def counts_design(frame: pd.DataFrame) -> np.ndarray:
    """Intercept and treatment contrasts of the counts dataset"""
    outcome, treatment = frame["outcome"].to_numpy(), frame["treatment"].to_numpy()
    return np.column_stack(
        [
            np.ones(len(frame)),
            outcome == 2,
            outcome == 3,
            treatment == 2,
            treatment == 3,
        ]
    ).astype(float)
