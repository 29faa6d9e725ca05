"""
Tests for the exponential family observation densities
"""

import numpy as np
import pytest
from scipy import stats
from scipy.special import expit

from src.distributions import density_eval, draw, inverse_link, variance_function
from src.errors import DataError

CASES = {
    "gaussian": (np.array([-1.0, 0.3, 2.5]), np.array([0.5, 1.0, 2.0])),
    "poisson": (np.array([0.0, 3.0, 12.0]), np.array([1.0, 2.0, 0.5])),
    "binomial": (np.array([0.0, 4.0, 10.0]), np.array([10.0, 10.0, 10.0])),
    "gamma": (np.array([0.2, 1.5, 7.0]), np.array([0.8, 2.0, 5.0])),
    "negative-binomial": (np.array([0.0, 5.0, 30.0]), np.array([0.7, 2.0, 10.0])),
}
THETA = np.array([-0.4, 0.8, 1.7])


def reference_logpdf(dist, y, u, theta):
    if dist == "gaussian":
        return stats.norm.logpdf(y, theta, np.sqrt(u))
    if dist == "poisson":
        return stats.poisson.logpmf(y, u * np.exp(theta))
    if dist == "binomial":
        return stats.binom.logpmf(y, u.astype(int), expit(theta))
    if dist == "gamma":
        return stats.gamma.logpdf(y, a=u, scale=np.exp(theta) / u)
    mu = np.exp(theta)
    return stats.nbinom.logpmf(y, u, u / (u + mu))


@pytest.mark.parametrize("dist", sorted(CASES))
def test_log_density_matches_scipy(dist):
    """Test log densities include all normalizing constants"""
    y, u = CASES[dist]
    out = density_eval(dist, y, u, THETA)
    np.testing.assert_allclose(out.logp, reference_logpdf(dist, y, u, THETA), rtol=1e-10)


@pytest.mark.parametrize("dist", sorted(CASES))
def test_derivatives_match_finite_differences(dist):
    """Test first and second theta derivatives"""
    y, u = CASES[dist]
    h = 1e-5
    up = density_eval(dist, y, u, THETA + h)
    down = density_eval(dist, y, u, THETA - h)
    mid = density_eval(dist, y, u, THETA)

    np.testing.assert_allclose(mid.d1, (up.logp - down.logp) / (2 * h), rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(mid.d2, (up.d1 - down.d1) / (2 * h), rtol=1e-6, atol=1e-7)
    assert np.all(mid.d2 < 0)


@pytest.mark.parametrize("dist", sorted(CASES))
def test_moment_maps(dist):
    """Test mean and variance agree with the link helpers"""
    y, u = CASES[dist]
    out = density_eval(dist, y, u, THETA)

    np.testing.assert_allclose(out.mean, inverse_link(dist, THETA, u))
    np.testing.assert_allclose(out.var, variance_function(dist, THETA, u))


@pytest.mark.parametrize(
    "dist, y, u",
    [
        ("poisson", [-1.0], [1.0]),
        ("poisson", [1.0], [0.0]),
        ("binomial", [11.0], [10.0]),
        ("gamma", [0.0], [1.0]),
        ("negative-binomial", [-2.0], [1.0]),
        ("gaussian", [0.0], [-1.0]),
    ],
)
def test_support_violations(dist, y, u):
    """Test observations outside the support are rejected"""
    with pytest.raises(DataError):
        density_eval(dist, y, u, [0.0])


def test_unknown_distribution():
    """Test unknown names are rejected"""
    with pytest.raises(DataError):
        density_eval("weibull", [1.0], [1.0], [0.0])
    with pytest.raises(DataError):
        inverse_link("weibull", [0.0])


@pytest.mark.parametrize("dist", sorted(CASES))
def test_draw_moments(dist):
    """Test simulated observations have the model mean and variance"""
    rng = np.random.default_rng(5)
    u = {"binomial": 20.0}.get(dist, 2.0)
    theta = np.full(40000, 0.3)
    values = draw(dist, theta, u, rng)

    mean = float(inverse_link(dist, 0.3, u))
    var = float(variance_function(dist, 0.3, u))
    assert values.mean() == pytest.approx(mean, rel=0.03, abs=0.03)
    assert values.var() == pytest.approx(var, rel=0.08)
