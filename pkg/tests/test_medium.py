import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aquasplat.errors import InvalidInputError
from aquasplat.medium import MediumParams, apply_medium, apply_medium_backward, restore_true_color, transmission


def test_transmission_examples():
    np.testing.assert_array_equal(transmission([0.3, 0.2, 0.1], np.zeros((2, 2))), 1.0)
    np.testing.assert_allclose(transmission(np.log(2), np.ones((1, 1))), 0.5, rtol=1e-15)
    np.testing.assert_allclose(transmission([0.1, 0.2, 0.3], np.full((1, 1), 2.0))[0, 0], np.exp([-0.2, -0.4, -0.6]), rtol=1e-15)


def test_negative_depth_rejected():
    with pytest.raises(InvalidInputError):
        transmission([0.1] * 3, -np.ones((2, 2)))


def test_surface_limit_is_identity(rng):
    j = rng.uniform(size=(4, 5, 3))
    m = MediumParams.from_physical([0.3, 0.2, 0.1], [0.5, 0.4, 0.3], [0.1, 0.3, 0.4])
    np.testing.assert_array_equal(apply_medium(j, np.zeros((4, 5)), m), j)
    restored, bad = restore_true_color(j, np.zeros((4, 5)), m)
    np.testing.assert_array_equal(restored, j)
    assert not bad.any()


def test_far_limit_is_background(rng):
    m = MediumParams.from_physical(1.0, 1.0, [0.1, 0.3, 0.4])
    out = apply_medium(rng.uniform(size=(2, 2, 3)), np.full((2, 2), 1e6), m)
    np.testing.assert_allclose(out, np.broadcast_to([0.1, 0.3, 0.4], out.shape), rtol=1e-12)
    _, bad = restore_true_color(out, np.full((2, 2), 1e6), m)
    assert bad.all()


def test_closed_form_half():
    m = MediumParams.from_physical(np.log(2), np.log(2), 0.2)
    out = apply_medium(np.full((1, 1, 3), 0.8), np.ones((1, 1)), m)
    np.testing.assert_allclose(out, 0.5, rtol=1e-12)


def test_shape_mismatch_rejected():
    with pytest.raises(InvalidInputError):
        apply_medium(np.zeros((2, 3, 3)), np.zeros((3, 2)), MediumParams.from_physical(0.1, 0.1, 0.5))


def test_round_trip(rng):
    for _ in range(20):
        j = rng.uniform(size=(6, 7, 3))
        z = rng.uniform(0, 5, (6, 7))
        m = MediumParams.from_physical(rng.uniform(0.05, 0.5, 3), rng.uniform(0.05, 0.5, 3), rng.uniform(0.05, 0.95, 3))
        restored, bad = restore_true_color(apply_medium(j, z, m), z, m)
        assert not bad.any()
        assert np.abs(restored - j).max() < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 20), st.floats(0.01, 2), st.floats(0.01, 2), st.floats(0.01, 0.99))
def test_monotone_in_clean(a, b, z, bd, bb, binf):
    lo, hi = min(a, b), max(a, b)
    m = MediumParams.from_physical(bd, bb, binf)
    depth = np.full((1, 1), z)
    assert np.all(apply_medium(np.full((1, 1, 3), hi), depth, m) >= apply_medium(np.full((1, 1, 3), lo), depth, m))


def test_backward_matches_finite_differences(rng):
    j = rng.uniform(size=(3, 4, 3))
    z = rng.uniform(0.5, 4, (3, 4))
    m = MediumParams.from_physical([0.2, 0.3, 0.4], [0.25, 0.15, 0.35], [0.1, 0.3, 0.4])
    w = rng.normal(size=(3, 4, 3))
    d_clean, d_depth, d_med = apply_medium_backward(j, z, m, w)

    def loss(jj, zz, vec):
        return float(np.sum(w * apply_medium(jj, zz, MediumParams.from_vector(vec))))

    eps = 1e-6
    vec = m.to_vector()
    for k in range(9):
        up, dn = vec.copy(), vec.copy()
        up[k] += eps
        dn[k] -= eps
        num = (loss(j, z, up) - loss(j, z, dn)) / (2 * eps)
        assert abs(num - d_med[k]) / max(abs(num), abs(d_med[k]), 1e-8) < 1e-5
    for idx in [(0, 0), (2, 3), (1, 2)]:
        up, dn = z.copy(), z.copy()
        up[idx] += eps
        dn[idx] -= eps
        num = (loss(j, up, vec) - loss(j, dn, vec)) / (2 * eps)
        assert abs(num - d_depth[idx]) / max(abs(num), 1e-8) < 1e-5
    np.testing.assert_allclose(d_clean, w * np.exp(-m.beta_d * z[..., None]))


def test_parameter_vector_round_trip():
    m = MediumParams.from_physical([0.2, 0.3, 0.4], [0.1, 0.2, 0.3], [0.1, 0.3, 0.4])
    back = MediumParams.from_vector(m.to_vector())
    np.testing.assert_allclose(back.beta_d, [0.2, 0.3, 0.4], rtol=1e-15)
    np.testing.assert_allclose(back.b_inf, [0.1, 0.3, 0.4], rtol=1e-14)
