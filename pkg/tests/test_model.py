"""
Tests for the model container, validation and observation transforms
"""

import numpy as np
import pytest

from src.errors import ModelError
from src.model import (
    StateSpaceModel,
    UnivariateView,
    check,
    extend,
    ldl_transform,
    validate,
    with_proper_prior,
)


def _codes(model):
    return [v.code for v in validate(model)]


def _bivariate(H):
    return StateSpaceModel(
        y=[[1.0, 2.0], [0.5, np.nan], [np.nan, np.nan]],
        Z=np.eye(2),
        H=H,
        T=np.eye(2),
        R=np.eye(2),
        Q=np.eye(2),
        a1=np.zeros(2),
        P1=np.eye(2),
        P1inf=np.zeros((2, 2)),
    )


def test_valid_model_has_no_violations(local_level):
    """Test that a well formed model validates"""
    assert validate(local_level) == []
    assert check(local_level) is local_level
    assert local_level.diffuse_states.tolist() == [True]
    assert local_level.series_names == ("y",)


def test_arrays_are_read_only(local_level):
    """Test that stored matrices cannot be modified in place"""
    with pytest.raises(ValueError):
        local_level.y[0, 0] = 3.0
    changed = local_level.replace(H=np.array([[2.0]]))
    assert changed.H[0, 0, 0] == 2.0
    assert local_level.H[0, 0, 0] == 1.0


def test_dimension_mismatch(local_level):
    """Test wrong system matrix shapes are reported"""
    model = local_level.replace(Z=np.ones((1, 2)))
    assert "dimension-mismatch" in _codes(model)

    model = local_level.replace(T=np.ones((1, 1, 5)))
    assert "dimension-mismatch" in _codes(model)


def test_prior_violations(local_level):
    """Test P1inf must be binary and diffuse rows of P1 zero"""
    assert "p1inf-not-binary" in _codes(local_level.replace(P1inf=np.array([[0.5]])))
    assert "diffuse-row-nonzero" in _codes(local_level.replace(P1=np.array([[1.0]])))

    with pytest.raises(ModelError, match="diffuse-row-nonzero"):
        check(local_level.replace(P1=np.array([[1.0]])))


def test_nongaussian_violations(local_level):
    """Test H and u restrictions of non-gaussian series"""
    poisson = local_level.replace(distribution=("poisson",))
    assert "h-nongaussian-nonzero" in _codes(poisson)

    poisson = poisson.replace(H=np.zeros((1, 1)), u=np.array([[1.0], [-2.0]]))
    assert _codes(poisson) == ["nonpositive-u"]

    assert "unknown-distribution" in _codes(local_level.replace(distribution=("weibull",)))


def test_ldl_transform_decorrelates():
    """Test L D L' reproduces H and the transformed equation"""
    H = np.array([[2.0, 1.0], [1.0, 2.0]])
    model = _bivariate(H)
    out = ldl_transform(model, 0)

    np.testing.assert_allclose(out.L @ np.diag(out.D) @ out.L.T, H, atol=1e-12)
    np.testing.assert_allclose(out.L @ out.y, model.y[0], atol=1e-12)
    np.testing.assert_allclose(out.L @ out.Z, model.Z_at(0), atol=1e-12)
    assert out.D[1] == pytest.approx(1.5)


def _observed_model(H, seed):
    gen = np.random.default_rng(seed)
    p = H.shape[0]
    return StateSpaceModel(
        y=gen.standard_normal((2, p)),
        Z=gen.standard_normal((p, 2)),
        H=H,
        T=np.eye(2),
        R=np.eye(2),
        Q=np.eye(2),
        a1=np.zeros(2),
        P1=np.eye(2),
        P1inf=np.zeros((2, 2)),
    )


@pytest.mark.parametrize("seed", range(20))
def test_ldl_round_trip_random_covariances(seed):
    """Test L D L' = H and the transformed equation for random H"""
    gen = np.random.default_rng(seed)
    A = gen.standard_normal((4, 4))
    H = A @ A.T + 0.1 * np.eye(4)
    model = _observed_model(H, seed)
    out = ldl_transform(model, 0)

    scale = np.abs(H).max()
    np.testing.assert_allclose(out.L @ np.diag(out.D) @ out.L.T, H, atol=1e-10 * scale)
    np.testing.assert_allclose(np.diag(out.L), np.ones(4))
    np.testing.assert_allclose(np.triu(out.L, 1), 0.0)
    assert np.all(out.D > 0)
    np.testing.assert_allclose(out.L @ out.y, model.y[0], atol=1e-10 * scale)
    np.testing.assert_allclose(out.L @ out.Z, model.Z_at(0), atol=1e-10 * scale)


def test_ldl_singular_covariance():
    """Test a rank deficient H gives a zero pivot and still reconstructs"""
    A = np.array([[1.0, 0.0], [0.5, 1.0], [1.5, 1.0]])
    H = A @ A.T
    out = ldl_transform(_observed_model(H, 3), 0)

    assert out.D[2] == 0.0
    np.testing.assert_allclose(out.L @ np.diag(out.D) @ out.L.T, H, atol=1e-12)


def test_ldl_skips_missing_rows():
    """Test missing rows keep identity loadings"""
    H = np.array([[2.0, 1.0], [1.0, 2.0]])
    out = ldl_transform(_bivariate(H), 1)

    np.testing.assert_allclose(out.L, np.eye(2))
    assert out.y[0] == 0.5


def test_univariate_view_passes_diagonal_through():
    """Test diagonal H needs no transform"""
    model = _bivariate(np.diag([1.0, 3.0]))
    view = UnivariateView(model)
    y, Z, h = view.at(0)

    assert view.diagonal
    np.testing.assert_allclose(y, [1.0, 2.0])
    np.testing.assert_allclose(h, [1.0, 3.0])


def test_univariate_view_round_trip():
    """Test transform and untransform invert each other on observed rows"""
    model = _bivariate(np.array([[2.0, 0.5], [0.5, 1.0]]))
    view = UnivariateView(model)
    e = np.array([0.3, -1.2])

    np.testing.assert_allclose(view.untransform(0, view.transform(0, e)), e, atol=1e-12)


def test_extend_time_invariant(local_level):
    """Test appending a horizon of missing observations"""
    future = extend(local_level, 3)

    assert future.n == 5
    assert np.isnan(future.y[2:]).all()
    assert future.Z.shape[2] == 1
    assert future.u.shape == (5, 1)


def test_extend_requires_time_varying_values(local_level):
    """Test time varying matrices need future values"""
    model = local_level.replace(Z=np.ones((1, 1, 2)))
    with pytest.raises(ModelError, match="time varying"):
        extend(model, 2)

    future = extend(model, 2, {"Z": np.full((1, 1, 2), 0.5)})
    assert future.Z.shape == (1, 1, 4)
    assert future.Z[0, 0, 3] == 0.5


def test_extend_requires_u_for_nongaussian(local_level):
    """Test non-gaussian horizons need exposures"""
    model = local_level.replace(distribution=("poisson",), H=np.zeros((1, 1)))
    with pytest.raises(ModelError, match="u must be supplied"):
        extend(model, 2)

    future = extend(model, 2, {"u": [[2.0], [3.0]]})
    assert future.u[-1, 0] == 3.0


def test_with_proper_prior(local_level):
    """Test diffuse states receive a proper variance"""
    model = with_proper_prior(local_level, [0], 1e4)

    assert model.P1inf[0, 0] == 0.0
    assert model.P1[0, 0] == 1e4
    assert validate(model) == []
