"""
Tests for fitting, prediction, residuals and signal extraction
"""

import numpy as np
import pytest
from scipy.linalg import block_diag
from scipy.stats import norm

from src.builders import assemble, build_regression, build_trend
from src.errors import ModelError, UsageError
from src.filtering import STEP_DIFFUSE, STEP_REGULAR, kalman_filter
from src.inference import (
    autocorrelations,
    coefficients,
    fit,
    fitted,
    kfs,
    predict,
    residuals,
    signal,
)
from src.likelihood import loglik_gaussian
from src.model import StateSpaceModel
from src.smoothing import smooth_states

from conftest import counts_design, glm_poisson, random_proper_model, random_walk_data


def level_model(Q=None, n: int = 40, seed: int = 3):
    y = random_walk_data(n, seed)
    y[[10, 11]] = np.nan
    return assemble([build_trend(1, Q=Q)], y, H=None if Q is None else 1.0)


def poisson_level(n: int = 20, seed: int = 6):
    gen = np.random.default_rng(seed)
    level = 1.2 + np.cumsum(0.2 * gen.standard_normal(n))
    y = gen.poisson(np.exp(level)).astype(float)
    return assemble([build_trend(1)], y, distribution=["poisson"], init_variance=0.05)


def test_glm_coefficients(counts_frame):
    """Test coefficients of a poisson regression equal the GLM fit"""
    X = counts_design(counts_frame)
    y = counts_frame["counts"].to_numpy(dtype=float)
    model = assemble([build_regression(X)], y, distribution=["poisson"]).model
    coef = coefficients(kfs(model))

    beta, se = glm_poisson(X, y)
    np.testing.assert_allclose(coef.estimate, beta, atol=1e-6)
    np.testing.assert_allclose(coef.se, se, atol=1e-5)
    assert coef.names == ("x1", "x2", "x3", "x4", "x5")

    np.testing.assert_allclose(fitted(kfs(model)), np.exp(X @ beta)[:, None], rtol=1e-5)


def test_fitted_gaussian_equals_smoothed_signal(local_level):
    """Test fitted values of a gaussian model are the smoothed signal"""
    out = kfs(local_level)

    np.testing.assert_allclose(fitted(out)[:, 0], [5 / 6, 2 / 3])
    np.testing.assert_allclose(fitted(out), out.smooth.thetahat)


def test_gaussian_kfs(local_level):
    """Test kfs of a gaussian model reports the diffuse likelihood"""
    out = kfs(local_level)

    assert out.loglik.method == "diffuse"
    np.testing.assert_allclose(out.alphahat[:, 0], [5 / 6, 2 / 3])
    np.testing.assert_allclose(out.mu, out.theta)
    assert out.approx is None


def test_fit_local_level():
    """Test maximum likelihood improves on and is stable from the start"""
    assembled = level_model()
    result = fit(assembled)

    assert result.converged
    assert result.loglik.value >= result.initial_loglik
    assert result.parameter_names == ("log_var(H)", "log_var(trend.level)")
    assert set(result.natural) == set(result.parameter_names)
    assert result.loglik.value == pytest.approx(
        loglik_gaussian(kalman_filter(result.model)).value
    )
    assert result.final_state.shape == (1,)

    again = fit(assembled, inits=result.parameters)
    assert again.loglik.value == pytest.approx(result.loglik.value, abs=1e-4)


def test_fit_with_bfgs_agrees():
    """Test both optimizers find the same maximum"""
    assembled = level_model()
    nm = fit(assembled)
    bfgs = fit(assembled, method="BFGS")

    assert bfgs.loglik.value == pytest.approx(nm.loglik.value, abs=1e-3)


def test_fit_without_parameters():
    """Test a model with nothing to estimate is evaluated once"""
    assembled = level_model(Q=[0.5])
    result = fit(assembled)

    assert result.parameters.size == 0
    assert result.converged
    assert result.message == "no parameters to estimate"
    assert result.loglik.value == pytest.approx(
        loglik_gaussian(kalman_filter(assembled.model)).value
    )


def test_failed_fit_is_reported(local_level):
    """Test an update function that always fails yields converged=False"""

    def broken(x):
        raise ModelError("no model for these parameters")

    result = fit(local_level, inits=[0.0], update_fn=broken, maxiter=20)

    assert not result.converged
    assert result.model is None
    assert result.loglik.method == "failed"
    assert result.final_state is None


def test_fit_argument_errors(local_level):
    """Test unknown optimizers and missing inits are usage errors"""
    with pytest.raises(UsageError):
        fit(level_model(), method="Powell")
    with pytest.raises(UsageError):
        fit(local_level)
    with pytest.raises(UsageError):
        fit(level_model(), starts=[[0.0]])


def test_random_intercept_matches_anova():
    """Test the diffuse likelihood gives REML (ANOVA) variance estimates"""
    G, J = 10, 8
    gen = np.random.default_rng(14)
    group = np.repeat(np.arange(G), J)
    y = 5.0 + 2.0 * gen.standard_normal(G)[group] + gen.standard_normal(G * J)
    indicators = (group[:, None] == np.arange(G)).astype(float)

    assembled = assemble(
        [
            build_regression(np.ones(G * J), names=["(Intercept)"], name="intercept"),
            build_regression(indicators, P1=np.eye(G), name="group"),
        ],
        y,
        H=1.0,
    )
    base = assembled.model

    def update(x):
        P1 = block_diag(np.zeros((1, 1)), np.exp(x[1]) * np.eye(G))
        return base.replace(H=np.exp(x[0]), P1=P1)

    result = fit(base, inits=[0.0, 0.0], update_fn=update)

    means = y.reshape(G, J).mean(axis=1)
    msw = np.sum((y.reshape(G, J) - means[:, None]) ** 2) / (G * (J - 1))
    msb = J * np.sum((means - y.mean()) ** 2) / (G - 1)
    sigma2, tau2 = np.exp(result.parameters)

    assert sigma2 == pytest.approx(msw, rel=0.02)
    assert tau2 == pytest.approx((msb - msw) / J, rel=0.02)


def test_multiple_starts():
    """Test extra starts never do worse and threads change nothing"""
    assembled = level_model()
    single = fit(assembled)
    multi = fit(assembled, starts=[[1.0, -2.0], [-1.0, 1.0]])
    threaded = fit(assembled, starts=[[1.0, -2.0], [-1.0, 1.0]], threads=3)

    assert multi.loglik.value >= single.loglik.value - 1e-6
    assert multi.evaluations > single.evaluations
    np.testing.assert_array_equal(threaded.parameters, multi.parameters)


def test_two_stage_nongaussian_fit():
    """Test a poisson fit refined with importance sampling"""
    assembled = poisson_level()
    result = fit(assembled, nsim=10, seed=4, two_stage=True, maxiter=60)

    assert result.loglik.method == "importance"
    assert result.loglik.seed == 4
    assert result.loglik.finite
    assert result.parameter_names == ("log_var(trend.level)",)


def test_kfs_importance_moments_near_mode():
    """Test importance sampled signals are close to the mode"""
    model = poisson_level().model
    mode = kfs(model)
    sampled = kfs(model, nsim=200, seed=2)

    np.testing.assert_allclose(sampled.theta, mode.theta, atol=0.15)
    assert np.all(sampled.mu > 0)
    assert np.all(sampled.Vtheta > 0)
    assert sampled.loglik.method == "importance"


def test_one_step_prediction():
    """Test the first forecast equals the filtered prediction"""
    model = level_model(Q=[0.5]).model
    fr = kalman_filter(model)
    n = model.n

    pred = predict(model, horizon=1, interval="prediction", level=0.9)
    conf = predict(model, horizon=1, interval="confidence", level=0.9)
    narrow = predict(model, horizon=1, interval="prediction", level=0.5)

    z = norm.ppf(0.95)
    assert pred.mean[0, 0] == pytest.approx(fr.a[n, 0])
    assert pred.upper[0, 0] - pred.mean[0, 0] == pytest.approx(z * np.sqrt(fr.P[n, 0, 0] + 1.0))
    assert conf.upper[0, 0] - conf.mean[0, 0] == pytest.approx(z * np.sqrt(fr.P[n, 0, 0]))
    assert pred.lower[0, 0] < conf.lower[0, 0] < conf.upper[0, 0] < pred.upper[0, 0]
    assert narrow.upper[0, 0] - narrow.lower[0, 0] < pred.upper[0, 0] - pred.lower[0, 0]
    np.testing.assert_array_equal(pred.times, [n])


def test_fitted_values_without_horizon():
    """Test horizon 0 returns smoothed signals"""
    model = level_model(Q=[0.5]).model
    sm = smooth_states(kalman_filter(model), model)
    out = predict(model)

    assert out.mean.shape == (model.n, 1)
    np.testing.assert_allclose(out.mean, sm.thetahat)


def test_prediction_argument_errors(local_level):
    """Test invalid intervals, types and levels"""
    with pytest.raises(UsageError):
        predict(local_level, interval="credible")
    with pytest.raises(UsageError):
        predict(local_level, type="scale")
    with pytest.raises(UsageError):
        predict(local_level, level=1.0)


def test_nongaussian_prediction():
    """Test mode based confidence intervals and the nsim requirement"""
    model = poisson_level().model
    newdata = {"u": np.ones((2, 1))}

    out = predict(model, horizon=2, newdata=newdata)
    assert np.all(out.mean > 0)
    assert np.all(out.lower < out.mean)
    assert np.all(out.mean < out.upper)

    link = predict(model, horizon=2, newdata=newdata, type="link")
    np.testing.assert_allclose(np.exp(link.mean), out.mean)

    with pytest.raises(UsageError):
        predict(model, horizon=2, newdata=newdata, interval="prediction")


def test_univariate_residual_kinds_agree():
    """Test recursive, marginal and Cholesky residuals coincide for one series"""
    model = level_model(Q=[0.5]).model
    res = residuals(model)

    assert res.d == 1
    assert np.isnan(res.recursive[0, 0])
    assert np.isnan(res.recursive[10, 0])
    np.testing.assert_allclose(res.recursive, res.marginal, equal_nan=True)
    np.testing.assert_allclose(res.recursive, res.cholesky, equal_nan=True)
    np.testing.assert_allclose(res.quadratic, res.cholesky[:, 0] ** 2, equal_nan=True)
    assert res.get("auxiliary").shape == (model.n, 2)
    with pytest.raises(UsageError):
        res.get("pearson")


def test_quadratic_residuals_ignore_series_order():
    """Test the quadratic form does not depend on how series are ordered"""
    model = random_proper_model(5)
    swapped = model.replace(
        y=model.y[:, ::-1], Z=model.Z[::-1], H=model.H[::-1, ::-1]
    )

    np.testing.assert_allclose(
        residuals(model).quadratic, residuals(swapped).quadratic, rtol=1e-9, equal_nan=True
    )


def test_recursive_residuals_within_last_diffuse_time():
    """Test series resolved after the diffuse state keep their residual"""
    gen = np.random.default_rng(8)
    y = np.cumsum(gen.standard_normal(12))[:, None] + gen.standard_normal((12, 2))
    model = StateSpaceModel(
        y=y, Z=np.ones((2, 1)), H=np.eye(2), T=1.0, R=1.0, Q=0.5, a1=0.0, P1=0.0, P1inf=1.0
    )
    fr = kalman_filter(model)
    res = residuals(model)

    assert res.d == 1
    assert fr.steps[0, 0] == STEP_DIFFUSE
    assert fr.steps[0, 1] == STEP_REGULAR
    assert np.isnan(res.recursive[0, 0])
    assert res.recursive[0, 1] == pytest.approx((y[0, 1] - y[0, 0]) / np.sqrt(2.0))
    assert np.isfinite(res.recursive[1:]).all()
    assert np.isnan(res.marginal[0]).all()
    assert np.isnan(res.quadratic[0])


def test_proper_prior_residuals_start_at_one():
    """Test a proper prior gives residuals from the first time point"""
    model = level_model(Q=[0.5]).model
    res = residuals(model, proper_prior=True)

    assert res.d == 0
    assert np.isfinite(res.recursive[0, 0])


def test_nongaussian_residuals():
    """Test count residuals need draws and skip the diffuse phase"""
    model = poisson_level().model
    with pytest.raises(UsageError):
        residuals(model)

    res = residuals(model, nsim=50, seed=1)
    assert np.isnan(res.recursive[0, 0])
    assert np.isfinite(res.recursive[1:]).all()
    assert res.marginal is None


def test_autocorrelations(rng):
    """Test lag zero correlations and missing values"""
    x = rng.standard_normal((200, 2))
    x[5, 0] = np.nan
    acf = autocorrelations(x, max_lag=4)

    assert acf.shape == (5, 2, 2)
    np.testing.assert_allclose(np.diag(acf[0]), [1.0, 1.0])
    assert np.all(np.abs(acf[1:]) < 0.3)


def test_component_signals():
    """Test component signals add up to the full signal"""
    gen = np.random.default_rng(9)
    x = gen.standard_normal(30)
    y = random_walk_data(30, 2) + 2.0 * x
    assembled = assemble(
        [build_trend(1, Q=[0.5]), build_regression(x, name="reg")], y, H=1.0
    )
    model = assembled.model
    sm = smooth_states(kalman_filter(model), model)

    full, _ = signal(assembled, sm)
    trend, _ = signal(assembled, sm, ["trend"])
    reg, reg_var = signal(assembled, sm, ["reg"])
    empty, _ = signal(assembled, sm, [])

    np.testing.assert_allclose(full, sm.thetahat)
    np.testing.assert_allclose(trend + reg, full)
    assert not empty.any()
    assert np.all(reg_var >= 0)
    with pytest.raises(ModelError):
        signal(assembled, sm, ["season"])
