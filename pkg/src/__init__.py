"""
ssmkit - exponential family state space models
Exact diffuse filtering and smoothing, simulation and maximum likelihood
"""

__version__ = "1.0.0"

from .builders import (
    ESTIMATE,
    ESTIMATE_DIAGONAL,
    assemble,
    build_arima,
    build_custom,
    build_cycle,
    build_regression,
    build_seasonal,
    build_trend,
)
from .config import Config
from .filtering import kalman_filter
from .inference import fit, kfs, predict, residuals, signal
from .likelihood import loglik_gaussian, loglik_nongaussian, reml_fit
from .model import StateSpaceModel, validate
from .simulation import importance_sample, simulate_conditional
from .smoothing import smooth_disturbances, smooth_states

__all__ = [
    "Config",
    "StateSpaceModel",
    "validate",
    "ESTIMATE",
    "ESTIMATE_DIAGONAL",
    "assemble",
    "build_arima",
    "build_custom",
    "build_cycle",
    "build_regression",
    "build_seasonal",
    "build_trend",
    "kalman_filter",
    "smooth_states",
    "smooth_disturbances",
    "loglik_gaussian",
    "loglik_nongaussian",
    "reml_fit",
    "importance_sample",
    "simulate_conditional",
    "fit",
    "kfs",
    "predict",
    "residuals",
    "signal",
]
