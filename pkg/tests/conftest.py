"""Shared fixtures and independent reference implementations for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from aquasplat.camera import Camera
from aquasplat.gaussian import SEMANTIC_DIM, GaussianCloud, rgb_to_sh_dc


def axis_camera(width: int = 8, height: int = 8, focal: float = 10.0, cx: float | None = None, cy: float | None = None) -> Camera:
    """Camera at the origin looking down +z with an identity rotation."""
    return Camera(focal, focal, width / 2.0 if cx is None else cx, height / 2.0 if cy is None else cy, width, height, np.eye(3), np.zeros(3))


def make_cloud(positions, scales, colors, opacity_logits, rotations=None, sh_k: int = 1) -> GaussianCloud:
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = positions.shape[0]
    sh = np.zeros((n, sh_k, 3))
    sh[:, 0] = rgb_to_sh_dc(np.broadcast_to(colors, (n, 3)))
    if rotations is None:
        rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianCloud(
        positions=positions,
        log_scales=np.log(np.broadcast_to(scales, (n, 3))),
        rotations=rotations,
        sh_coeffs=sh,
        opacity_logits=np.broadcast_to(opacity_logits, (n,)),
        semantic_features=np.zeros((n, SEMANTIC_DIM)),
    )


def random_cloud(rng: np.random.Generator, n: int, sh_k: int = 4, depth=(2.0, 5.0), spread: float = 1.0) -> GaussianCloud:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(
        positions=np.column_stack([rng.uniform(-spread, spread, (n, 2)), rng.uniform(*depth, n)]),
        log_scales=np.log(rng.uniform(0.05, 0.4, (n, 3))),
        rotations=q,
        sh_coeffs=rng.normal(0.0, 0.3, (n, sh_k, 3)),
        opacity_logits=rng.normal(0.0, 1.5, n),
        semantic_features=rng.normal(size=(n, SEMANTIC_DIM)),
    )


def reference_render(cloud: GaussianCloud, camera: Camera, termination: float = 0.0):
    """Scalar per-pixel reference: projection, footprint and blending written out from scratch."""
    n = cloud.n
    h, w = camera.height, camera.width
    items = []
    for i in range(n):
        q = cloud.rotations[i] / np.linalg.norm(cloud.rotations[i])
        a, b, c, d = q
        rot = np.array([
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
        ])
        s = np.diag(np.exp(cloud.log_scales[i]))
        cov3 = rot @ s @ s @ rot.T
        p = camera.rotation @ cloud.positions[i] + camera.translation
        if p[2] <= 0.01:
            continue
        jac = np.array([[camera.fx / p[2], 0.0, -camera.fx * p[0] / p[2] ** 2], [0.0, camera.fy / p[2], -camera.fy * p[1] / p[2] ** 2]])
        cov2 = jac @ camera.rotation @ cov3 @ camera.rotation.T @ jac.T + 0.3 * np.eye(2)
        mean = np.array([camera.fx * p[0] / p[2] + camera.cx, camera.fy * p[1] / p[2] + camera.cy])
        lam = 0.5 * np.trace(cov2) + np.sqrt(max(0.25 * np.trace(cov2) ** 2 - np.linalg.det(cov2), 0.0))
        r = 3.0 * np.sqrt(lam)
        if mean[0] + r < 0 or mean[0] - r > w or mean[1] + r < 0 or mean[1] - r > h:
            continue
        view = cloud.positions[i] - camera.center
        view = view / np.linalg.norm(view)
        colour = np.maximum(0.28209479177387814 * cloud.sh_coeffs[i, 0] + 0.5 + _sh_rest(cloud.sh_coeffs[i], view), 0.0)
        opacity = 1.0 / (1.0 + np.exp(-cloud.opacity_logits[i]))
        items.append((p[2], i, mean, np.linalg.inv(cov2), colour, opacity))
    items.sort(key=lambda t: (t[0], t[1]))
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    alpha = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            t = 1.0
            acc = np.zeros(3)
            zacc = 0.0
            for z, _, mean, inv, colour, opacity in items:
                dlt = np.array([x + 0.5, y + 0.5]) - mean
                m = dlt @ inv @ dlt
                g = np.exp(-0.5 * m) if m <= 9.0 else 0.0
                a = min(0.99, opacity * g)
                if t * (1.0 - a) < termination:
                    break
                acc += a * t * colour
                zacc += a * t * z
                t *= 1.0 - a
            color[y, x] = acc
            alpha[y, x] = 1.0 - t
            depth[y, x] = zacc / max(1.0 - t, 1e-6)
    return color, depth, alpha


def _sh_rest(coeffs: np.ndarray, v: np.ndarray) -> np.ndarray:
    k = coeffs.shape[0]
    if k == 1:
        return np.zeros(3)
    x, y, z = v
    c1 = 0.4886025119029199
    basis = [-c1 * y, c1 * z, -c1 * x]
    if k >= 9:
        basis += [
            1.0925484305920792 * x * y,
            -1.0925484305920792 * y * z,
            0.31539156525252005 * (2 * z * z - x * x - y * y),
            -1.0925484305920792 * x * z,
            0.5462742152960396 * (x * x - y * y),
        ]
    return np.asarray(basis) @ coeffs[1 : len(basis) + 1]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in module.RESULTS:
            terminalreporter.write_line(line)
