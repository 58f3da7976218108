import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import sph_harm_y

from aquasplat.errors import InvalidParameterError
from aquasplat.gaussian import GaussianCloud, build_covariance, eval_sh_color, quat_to_rotmat, sh_degree_for_count

finite = st.floats(-3.0, 3.0, allow_nan=False)


def _real_sh(l, m, v):
    """Real SH with the Condon-Shortley phase, built from scipy's complex harmonics."""
    theta = np.arccos(np.clip(v[2], -1.0, 1.0))
    phi = np.arctan2(v[1], v[0])
    y = sph_harm_y(l, abs(m), theta, phi)
    if m == 0:
        return y.real
    return np.sqrt(2.0) * (y.imag if m < 0 else y.real)


def test_identity_covariance():
    np.testing.assert_array_equal(build_covariance([0, 0, 0], [1, 0, 0, 0]), np.eye(3))


def test_diagonal_covariance():
    np.testing.assert_allclose(build_covariance([np.log(2), 0, 0], [1, 0, 0, 0]), np.diag([4.0, 1.0, 1.0]), atol=1e-15)


def test_isotropic_covariance_ignores_rotation():
    q = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]
    np.testing.assert_allclose(build_covariance([0, 0, 0], q), np.eye(3), atol=1e-15)


def test_rotation_matrix_is_orthonormal_and_proper(rng):
    q = rng.normal(size=(50, 4))
    r = quat_to_rotmat(q / np.linalg.norm(q, axis=1, keepdims=True))
    np.testing.assert_allclose(r @ np.swapaxes(r, 1, 2), np.broadcast_to(np.eye(3), r.shape), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(r), 1.0, atol=1e-12)


@pytest.mark.parametrize("q", [[2, 0, 0, 0], [0.5, 0.5, 0.5, 0.4]])
def test_non_unit_quaternion_rejected(q):
    with pytest.raises(InvalidParameterError):
        build_covariance([0, 0, 0], q)


def test_non_finite_covariance_input_rejected():
    with pytest.raises(InvalidParameterError):
        build_covariance([np.nan, 0, 0], [1, 0, 0, 0])


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=3, max_size=3), st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1))
def test_covariance_is_psd(log_scale, q):
    q = np.asarray(q) / np.linalg.norm(q)
    cov = build_covariance(log_scale, q)
    np.testing.assert_allclose(cov, cov.T, atol=1e-12 * np.abs(cov).max())
    # tiny jitter absorbs round-off on the smallest eigenvalue
    np.linalg.cholesky(cov + 1e-9 * np.abs(cov).max() * np.eye(3))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3), st.floats(0.1, 5.0))
def test_scaling_covariance(log_scale, t):
    q = np.array([0.8, 0.2, -0.4, 0.4])
    q /= np.linalg.norm(q)
    a = build_covariance(log_scale, q)
    b = build_covariance(np.asarray(log_scale) + np.log(t), q)
    np.testing.assert_allclose(b, t * t * a, rtol=1e-10, atol=1e-14)


def test_degree0_color_is_view_independent(rng):
    c = rng.normal(size=(1, 3))
    np.testing.assert_array_equal(eval_sh_color(c, [0, 0, 1]), eval_sh_color(c, [0.6, 0.8, 0]))


def test_degree1_odd_symmetry(rng):
    c = rng.normal(0, 0.2, (4, 3))
    v = np.array([0.3, -0.5, 0.81])
    v /= np.linalg.norm(v)
    assert not np.allclose(eval_sh_color(c, v), eval_sh_color(c, -v))
    c[1:] = 0.0
    np.testing.assert_array_equal(eval_sh_color(c, v), eval_sh_color(c, -v))


@pytest.mark.parametrize("degree", [1, 2, 3])
def test_sh_matches_scipy_oracle(rng, degree):
    k = (degree + 1) ** 2
    for _ in range(10):
        coeffs = rng.normal(0.0, 0.1, (k, 3))
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        basis = np.array([_real_sh(l, m, v) for l in range(degree + 1) for m in range(-l, l + 1)])
        expected = np.maximum(basis @ coeffs + 0.5, 0.0)
        np.testing.assert_allclose(eval_sh_color(coeffs, v), expected, atol=1e-12)


def test_sh_linear_before_clamp(rng):
    a = rng.normal(0.0, 0.05, (9, 3))
    b = rng.normal(0.0, 0.05, (9, 3))
    v = np.array([0.0, 0.6, 0.8])
    # colours are offset by 0.5, so linearity is in the raw sum
    lhs = eval_sh_color(a + b, v) - 0.5
    rhs = (eval_sh_color(a, v) - 0.5) + (eval_sh_color(b, v) - 0.5)
    np.testing.assert_allclose(lhs, rhs, atol=1e-14)


@pytest.mark.parametrize("k", [0, 2, 5, 25])
def test_invalid_sh_count(k):
    with pytest.raises(InvalidParameterError):
        sh_degree_for_count(k)


def test_cloud_shape_validation():
    with pytest.raises(InvalidParameterError):
        GaussianCloud(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((3, 4)), np.zeros((2, 9, 3)), np.zeros(2), np.zeros((2, 32)))


def test_cloud_create_invariants(rng):
    c = GaussianCloud.create(rng.normal(size=(5, 3)), 0.1, rng.uniform(size=(5, 3)), 0.3)
    assert np.all(c.scales > 0)
    assert np.all((c.opacities > 0) & (c.opacities < 1))
    np.testing.assert_allclose(np.linalg.norm(c.rotations, axis=1), 1.0)
    assert c.sh_degree == 2 and c.semantic_features.shape == (5, 32)
    np.testing.assert_array_equal(c.semantic_features, 0.0)
