"""
Tests for gaussian, diffuse, importance sampling and REML likelihoods
"""

import numpy as np
import pytest

from src.builders import assemble, build_arima, build_regression, build_seasonal, build_trend
from src.errors import UndefinedError
from src.filtering import filter_multivariate_oracle, kalman_filter
from src.likelihood import (
    importance_mc_se,
    log_mean_exp,
    loglik_gaussian,
    loglik_nongaussian,
    reml_fit,
    reml_variance,
)
from src.model import StateSpaceModel

from conftest import random_proper_model


def poisson_level(n: int = 30):
    gen = np.random.default_rng(8)
    level = 0.5 + np.cumsum(0.2 * gen.standard_normal(n))
    y = gen.poisson(np.exp(level)).astype(float)
    return assemble([build_trend(1, Q=[0.04])], y, distribution=["poisson"]).model


def regression_model(n: int = 25, q: int = 3, seed: int = 1):
    gen = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), gen.standard_normal((n, q - 1))])
    y = X @ np.arange(1.0, q + 1) + 1.3 * gen.standard_normal(n)
    model = StateSpaceModel(
        y=y,
        Z=X.T[None, :, :],
        H=1.0,
        T=np.eye(q),
        R=np.zeros((q, 0)),
        Q=np.zeros((0, 0)),
        a1=np.zeros(q),
        P1=np.zeros((q, q)),
        P1inf=np.eye(q),
    )
    return model, X, y


def test_diffuse_loglik_by_hand(local_level):
    """Test the diffuse likelihood of the two point local level"""
    ll = loglik_gaussian(kalman_filter(local_level))

    assert ll.method == "diffuse"
    assert ll.value == pytest.approx(-1.509911, abs=1e-6)
    assert ll.finite
    assert ll.to_dict()["method"] == "diffuse"


def test_proper_loglik_matches_oracle():
    """Test the proper likelihood against the multivariate filter"""
    model = random_proper_model(12)
    ll = loglik_gaussian(kalman_filter(model))

    assert ll.method == "gaussian"
    assert ll.value == pytest.approx(filter_multivariate_oracle(model).logL, rel=1e-10)


def test_log_mean_exp():
    """Test the stable log of an average"""
    assert log_mean_exp(np.log([1.0, 2.0, 3.0])) == pytest.approx(np.log(2.0))
    assert log_mean_exp(np.array([1000.0, 1000.0])) == pytest.approx(1000.0)


def test_importance_mc_se():
    """Test the Monte Carlo standard error of log mean w"""
    assert importance_mc_se(np.zeros(10)) == 0.0
    assert importance_mc_se(np.zeros(1)) == 0.0
    logw = np.log(np.array([1.0, 2.0, 3.0, 4.0]))
    w = np.exp(logw)
    expected = w.std(ddof=1) / (2 * w.mean())
    assert importance_mc_se(logw) == pytest.approx(expected)


def test_gaussian_model_through_nongaussian_path(local_level):
    """Test gaussian models give the exact likelihood"""
    ll = loglik_nongaussian(local_level, nsim=100, seed=1)
    assert ll.value == pytest.approx(-1.509911, abs=1e-6)


def test_nongaussian_mode_and_importance():
    """Test the importance sampling likelihood is close to its mode value"""
    model = poisson_level()
    mode = loglik_nongaussian(model)
    sampled = loglik_nongaussian(model, nsim=200, seed=3)

    assert mode.method == "approx-N0"
    assert sampled.method == "importance"
    assert sampled.nsim == 200
    assert sampled.seed == 3
    assert sampled.mc_se > 0
    assert abs(sampled.value - mode.value) < 0.5


def test_importance_loglik_is_reproducible():
    """Test the same seed gives the same likelihood"""
    model = poisson_level()
    first = loglik_nongaussian(model, nsim=50, seed=9)
    second = loglik_nongaussian(model, nsim=50, seed=9)
    other = loglik_nongaussian(model, nsim=50, seed=10)

    assert first.value == second.value
    assert first.value != other.value


def test_reml_regression_variance():
    """Test REML variance and coefficients of a linear regression"""
    model, X, y = regression_model()
    n, q = X.shape
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    rss = float(np.sum((y - X @ beta) ** 2))

    assert reml_variance(kalman_filter(model)) == pytest.approx(rss / (n - q), rel=1e-8)

    result = reml_fit(model)
    sigma2 = rss / (n - q)
    assert result.sigma2 == pytest.approx(sigma2, rel=1e-8)
    np.testing.assert_allclose(result.coefficients, beta, atol=1e-8)
    np.testing.assert_allclose(result.covariance, sigma2 * np.linalg.inv(X.T @ X), atol=1e-8)


def test_reml_via_regression_builder():
    """Test the builder route gives the same REML fit"""
    model, X, y = regression_model()
    built = assemble([build_regression(X)], y, H=1.0).model

    assert reml_fit(built).sigma2 == pytest.approx(reml_fit(model).sigma2, rel=1e-10)


def test_reml_undefined_without_regular_steps():
    """Test REML needs observations beyond the diffuse phase"""
    model, _, _ = regression_model(n=3)
    with pytest.raises(UndefinedError):
        reml_variance(kalman_filter(model))


def test_reml_counts_repeated_design_rows():
    """Test REML uses resolved rows met inside the diffuse phase"""
    X = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 2.0], [2.0, 1.0]])
    gen = np.random.default_rng(21)
    y = X @ np.array([1.0, 2.0]) + gen.standard_normal(6)
    model = assemble([build_regression(X)], y, H=1.0).model
    fr = kalman_filter(model)

    np.testing.assert_array_equal(fr.steps[:, 0], [1, 2, 1, 0, 0, 0])
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    sigma2 = float(np.sum((y - X @ beta) ** 2)) / 4
    assert reml_variance(fr) == pytest.approx(sigma2, rel=1e-10)

    result = reml_fit(model)
    np.testing.assert_allclose(result.coefficients, beta, atol=1e-10)
    np.testing.assert_allclose(result.covariance, sigma2 * np.linalg.inv(X.T @ X), atol=1e-10)


def test_importance_mc_se_scales_with_draws(rng):
    """Test the standard error halves when the draws quadruple"""
    small = importance_mc_se(0.5 * rng.standard_normal(2000))
    large = importance_mc_se(0.5 * rng.standard_normal(8000))

    assert small / large == pytest.approx(2.0, rel=0.1)


def test_importance_loglik_se_scales_with_nsim():
    """Test the likelihood's Monte Carlo error shrinks like 1/sqrt(nsim)"""
    model = poisson_level()
    seeds = range(1, 5)
    small = np.mean([loglik_nongaussian(model, nsim=25, seed=s).mc_se for s in seeds])
    large = np.mean([loglik_nongaussian(model, nsim=100, seed=s).mc_se for s in seeds])

    assert 2.0 / 1.6 < small / large < 2.0 * 1.6


def test_loglik_ignores_component_order():
    """Test reordering the components leaves the diffuse likelihood unchanged"""
    gen = np.random.default_rng(17)
    n = 40
    x = gen.standard_normal(n)
    y = np.cumsum(gen.standard_normal(n)) + np.tile([1.0, -0.5, 0.0, -0.5], n // 4) + x
    y[[6, 20]] = np.nan
    components = [
        build_trend(2, Q=[0.3, 0.01]),
        build_seasonal(4, Q=0.1),
        build_regression(x, name="reg"),
    ]
    forward = assemble(components, y, H=1.0).model
    backward = assemble(components[::-1], y, H=1.0).model

    assert forward.state_names != backward.state_names
    assert loglik_gaussian(kalman_filter(backward)).value == pytest.approx(
        loglik_gaussian(kalman_filter(forward)).value, rel=1e-9
    )


def test_structural_trend_equals_arima_with_drift():
    """Test a trend with fixed slope and ARIMA(0,1,1) with drift have one likelihood"""
    gen = np.random.default_rng(5)
    n = 30
    y = np.cumsum(0.8 + np.sqrt(0.5) * gen.standard_normal(n)) + gen.standard_normal(n)
    structural = assemble([build_trend(2, Q=[0.5, 0.0])], y, H=1.0).model
    # level variance 0.5 and noise 1 give an MA(1) with theta -0.5, variance 2
    arima = assemble(
        [
            build_arima(ma=[-0.5], d=1, sigma2=2.0),
            build_regression(np.arange(1.0, n + 1), name="drift"),
        ],
        y,
        H=0.0,
    ).model

    assert loglik_gaussian(kalman_filter(arima)).value == pytest.approx(
        loglik_gaussian(kalman_filter(structural)).value, abs=1e-8
    )
