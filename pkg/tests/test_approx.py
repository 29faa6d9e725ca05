"""
Tests for the gaussian approximation of exponential family models
"""

import logging

import numpy as np
import pytest

from src.approx import approximate, filter_nongaussian, initial_signal
from src.builders import assemble, build_regression, build_trend
from src.distributions import density_eval
from src.filtering import kalman_filter
from src.smoothing import smooth_states

from conftest import counts_design, glm_poisson


def poisson_level(seed: int = 2, n: int = 40, Q: float = 0.05, missing=(5, 17)):
    gen = np.random.default_rng(seed)
    level = 1.0 + np.cumsum(np.sqrt(Q) * gen.standard_normal(n))
    y = gen.poisson(np.exp(level)).astype(float)
    y[list(missing)] = np.nan
    return assemble([build_trend(1, Q=[Q])], y, distribution=["poisson"]).model


def test_gaussian_model_needs_no_iterations(local_level):
    """Test gaussian models are returned as their own approximation"""
    approx = approximate(local_level)
    sm = smooth_states(kalman_filter(local_level), local_level)

    assert approx.iterations == 0
    assert approx.converged
    assert approx.log_what == 0.0
    np.testing.assert_allclose(approx.thetahat, sm.thetahat)


def test_initial_signal():
    """Test GLM style starting values"""
    model = poisson_level()
    theta = initial_signal(model)
    observed = ~np.isnan(model.y[:, 0])

    np.testing.assert_allclose(theta[observed, 0], np.log(model.y[observed, 0] + 0.5))
    assert np.isfinite(theta).all()


def test_poisson_mode_is_a_fixed_point():
    """Test the converged pseudo-data reproduce the mode"""
    model = poisson_level()
    approx = approximate(model)

    assert approx.converged
    assert approx.iterations > 1
    np.testing.assert_allclose(approx.smooth.thetahat, approx.thetahat, atol=1e-6)

    observed = ~np.isnan(model.y[:, 0])
    dens = density_eval("poisson", model.y[observed, 0], 1.0, approx.thetahat[observed, 0])
    np.testing.assert_allclose(approx.Htilde[observed, 0], -1.0 / dens.d2)
    np.testing.assert_allclose(
        approx.ytilde[observed, 0],
        approx.thetahat[observed, 0] + dens.d1 * approx.Htilde[observed, 0],
    )
    assert np.isnan(approx.ytilde[5, 0])
    assert approx.model.gaussian


def test_warm_start_converges_faster():
    """Test a start at the mode converges immediately"""
    model = poisson_level()
    cold = approximate(model)
    warm = approximate(model, theta=cold.thetahat)

    assert warm.iterations <= 2
    np.testing.assert_allclose(warm.thetahat, cold.thetahat, atol=1e-6)


def test_iteration_cap_reports_non_convergence(caplog):
    """Test hitting max_iter is flagged, not raised"""
    model = poisson_level()
    with caplog.at_level(logging.WARNING):
        approx = approximate(model, max_iter=1)

    assert not approx.converged
    assert "did not converge" in caplog.text


def test_static_regression_mode_is_glm(counts_frame):
    """Test the mode of diffuse coefficients is the GLM estimate"""
    X = counts_design(counts_frame)
    y = counts_frame["counts"].to_numpy(dtype=float)
    model = assemble([build_regression(X)], y, distribution=["poisson"]).model
    approx = approximate(model)

    beta, se = glm_poisson(X, y)
    n = model.n
    np.testing.assert_allclose(approx.alphahat[0], beta, atol=1e-6)
    np.testing.assert_allclose(approx.filter.a[n], beta, atol=1e-6)
    np.testing.assert_allclose(np.sqrt(np.diag(approx.filter.P[n])), se, atol=1e-5)
    assert beta[0] == pytest.approx(3.045, abs=1e-3)
    assert se[1] == pytest.approx(0.2022, abs=1e-3)


def test_binomial_level_converges():
    """Test a binomial model with varying sizes"""
    gen = np.random.default_rng(4)
    n = 30
    size = gen.integers(5, 20, n).astype(float)
    y = gen.binomial(size.astype(int), 0.3).astype(float)
    model = assemble(
        [build_trend(1, Q=[0.1])], y, distribution=["binomial"], u=size[:, None]
    ).model
    approx = approximate(model)

    assert approx.converged
    assert np.all(approx.Htilde > 0)


def test_filter_nongaussian_mode():
    """Test one-step-ahead moments from truncated approximations"""
    model = poisson_level(n=12, missing=(5,))
    nf = filter_nongaussian(model)

    assert nf.theta.shape == (12, 1)
    assert nf.Valpha.shape == (12, 1, 1)
    assert np.all(nf.Vmu[1:] > 0)
    np.testing.assert_allclose(nf.mu, np.exp(nf.theta))
    np.testing.assert_allclose(nf.Ey_var, nf.mu)
    # prediction for t uses data before t only
    changed = model.replace(y=np.where(np.arange(12)[:, None] >= 8, 0.0, model.y))
    np.testing.assert_allclose(filter_nongaussian(changed).theta[:9], nf.theta[:9], atol=1e-6)
