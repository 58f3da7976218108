import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aquasplat.camera import Camera
from aquasplat.raster import eval_gaussian_2d, project_gaussian, rasterize

from conftest import axis_camera, make_cloud, random_cloud, reference_render


def test_projection_on_axis():
    cam = axis_camera(64, 64, focal=100.0)
    sigma = 0.01
    mean2d, cov2d, z = project_gaussian([0, 0, 1], sigma**2 * np.eye(3), cam)
    np.testing.assert_allclose(mean2d, [cam.cx, cam.cy])
    np.testing.assert_allclose(cov2d, ((100 * sigma) ** 2 + 0.3) * np.eye(2), rtol=1e-12)
    assert z == 1.0


def test_projection_behind_camera_is_culled():
    assert project_gaussian([0, 0, -1], np.eye(3) * 0.01, axis_camera()) is None


def test_projection_rigid_invariance(rng):
    cam = Camera.look_at([0.3, 0.2, -3], [0, 0, 0], focal=20, width=32, height=32)
    shift = rng.normal(size=3)
    moved = Camera(cam.fx, cam.fy, cam.cx, cam.cy, 32, 32, cam.rotation, cam.translation - cam.rotation @ shift)
    cov = np.diag([0.04, 0.01, 0.02])
    a = project_gaussian([0.1, -0.2, 0.3], cov, cam)
    b = project_gaussian(np.array([0.1, -0.2, 0.3]) + shift, cov, moved)
    np.testing.assert_allclose(a[0], b[0], atol=1e-12)
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)
    assert a[2] == pytest.approx(b[2], abs=1e-12)


def test_footprint_peak_and_unit_distance():
    assert eval_gaussian_2d([3, 4], [3, 4], np.eye(2)) == 1.0
    assert eval_gaussian_2d([4, 5], [3, 4], np.eye(2)) == pytest.approx(np.exp(-1.0), abs=1e-15)


def test_footprint_matches_solve(rng):
    for _ in range(20):
        a = rng.normal(size=(2, 2))
        cov = a @ a.T + 0.1 * np.eye(2)
        x, mu = rng.normal(size=2), rng.normal(size=2)
        d = x - mu
        expected = np.exp(-0.5 * d @ np.linalg.solve(cov, d))
        assert eval_gaussian_2d(x, mu, cov) == pytest.approx(expected, rel=1e-12)


def test_single_gaussian_blend():
    cam = axis_camera(5, 5, focal=10.0, cx=2.5, cy=2.5)
    c = np.array([0.2, 0.5, 0.7])
    cloud = make_cloud([[0, 0, 2.0]], 0.05, c, 20.0)  # sigmoid(20) * 1 clamps to 0.99
    out = rasterize(cloud, cam, termination=0.0)
    np.testing.assert_allclose(out.color[2, 2], 0.99 * c, rtol=1e-12)
    assert out.depth[2, 2] == pytest.approx(2.0, rel=1e-12)


def test_two_gaussian_blend():
    cam = axis_camera(5, 5, focal=10.0, cx=2.5, cy=2.5)
    c1, c2 = np.array([0.9, 0.1, 0.1]), np.array([0.1, 0.2, 0.8])
    cloud = make_cloud([[0, 0, 3.0], [0, 0, 2.0]], 0.02, np.stack([c2, c1]), 0.0)
    out = rasterize(cloud, cam, termination=0.0)
    np.testing.assert_allclose(out.color[2, 2], 0.5 * c1 + 0.25 * c2, rtol=1e-12)


def test_matches_reference_on_4x4(rng):
    cam = Camera.look_at([0.2, -0.1, -4], [0, 0, 0], focal=4.0, width=4, height=4)
    cloud = random_cloud(rng, 8, depth=(-0.5, 0.5))
    out = rasterize(cloud, cam, termination=0.0)
    color, depth, alpha = reference_render(cloud, cam)
    np.testing.assert_allclose(out.color, color, atol=1e-12)
    np.testing.assert_allclose(out.alpha_accum, alpha, atol=1e-12)
    np.testing.assert_allclose(out.depth, depth, atol=1e-10)


def test_early_termination_matches_reference(rng):
    cam = Camera.look_at([0, 0, -4], [0, 0, 0], focal=8.0, width=8, height=8)
    cloud = random_cloud(rng, 30, depth=(-0.5, 0.5))
    cloud.opacity_logits[:] = 4.0
    out = rasterize(cloud, cam)
    color, _, alpha = reference_render(cloud, cam, termination=1e-4)
    np.testing.assert_allclose(out.color, color, atol=1e-12)
    np.testing.assert_allclose(out.alpha_accum, alpha, atol=1e-12)


def test_empty_and_culled_clouds_render_black():
    cam = axis_camera()
    cloud = make_cloud([[0, 0, -2.0]], 0.1, [0.5, 0.5, 0.5], 2.0)
    out = rasterize(cloud, cam)
    assert not out.color.any() and not out.alpha_accum.any()
    out = rasterize(cloud.select(np.array([], dtype=int)), cam)
    assert out.color.shape == (8, 8, 3) and not out.color.any()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_invariance(seed):
    # distinct depths: exact ties are broken by storage index, which a permutation changes
    rng = np.random.default_rng(seed)
    cam = Camera.look_at([0, 0, -4], [0, 0, 0], focal=10.0, width=20, height=20)
    cloud = random_cloud(rng, 20, depth=(-0.5, 0.5))
    perm = rng.permutation(cloud.n)
    a = rasterize(cloud, cam)
    b = rasterize(cloud.select(perm), cam)
    assert a.color.tobytes() == b.color.tobytes()
    assert a.depth.tobytes() == b.depth.tobytes()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 3.0))
def test_alpha_bounded_and_monotone_in_opacity(seed, bump):
    rng = np.random.default_rng(seed)
    cam = Camera.look_at([0, 0, -4], [0, 0, 0], focal=8.0, width=12, height=12)
    cloud = random_cloud(rng, 12, depth=(-0.5, 0.5))
    a = rasterize(cloud, cam, termination=0.0).alpha_accum
    more = cloud.copy()
    more.opacity_logits[int(rng.integers(12))] += bump
    b = rasterize(more, cam, termination=0.0).alpha_accum
    assert a.max() <= 1.0 and b.max() <= 1.0
    assert np.all(b >= a - 1e-15)


def test_thread_count_does_not_change_output(rng):
    cam = Camera.look_at([0, 0, -4], [0, 0, 0], focal=30.0, width=48, height=40)
    cloud = random_cloud(rng, 60, depth=(-0.5, 0.5))
    a = rasterize(cloud, cam, threads=1)
    b = rasterize(cloud, cam, threads=4)
    assert a.color.tobytes() == b.color.tobytes()
    assert a.depth.tobytes() == b.depth.tobytes()
