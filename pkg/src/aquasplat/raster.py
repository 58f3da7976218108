"""Screen-space projection and tile-based front-to-back alpha compositing.

Each visible Gaussian contributes ``alpha = min(0.99, sigmoid(o) * G(x))`` where
``G`` is its 2D footprint truncated to the 3-sigma ellipse (Mahalanobis^2 <= 9).
The truncation makes per-tile culling exact: a Gaussian left out of a tile list
would have contributed exactly zero there, so tiled and untiled blends agree.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, pixel_centers
from .gaussian import GaussianCloud, normalize_quat_grad, quat_to_rotmat, rotmat_grad_to_quat, sh_basis, sh_basis_jacobian, sigmoid

NEAR_PLANE = 0.01
DILATION = 0.3
ALPHA_MAX = 0.99
TERMINATION_T = 1e-4
MAHALANOBIS_CUTOFF = 9.0
DEPTH_EPS = 1e-6
TILE_SIZE = 16
_TILE_MARGIN = 1.0

THREADS_ENV = "AQUASPLAT_THREADS"


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# single-primitive helpers


def _ewa(p_cam: np.ndarray, cov3d: np.ndarray, camera: Camera):
    x, y, z = p_cam[..., 0], p_cam[..., 1], p_cam[..., 2]
    inv_z = 1.0 / z
    jac = np.zeros(p_cam.shape[:-1] + (2, 3))
    jac[..., 0, 0] = camera.fx * inv_z
    jac[..., 0, 2] = -camera.fx * x * inv_z * inv_z
    jac[..., 1, 1] = camera.fy * inv_z
    jac[..., 1, 2] = -camera.fy * y * inv_z * inv_z
    t = jac @ camera.rotation
    cov2d = t @ cov3d @ np.swapaxes(t, -1, -2) + DILATION * np.eye(2)
    mean2d = np.stack([camera.fx * x * inv_z + camera.cx, camera.fy * y * inv_z + camera.cy], axis=-1)
    return mean2d, cov2d, jac, t


def _max_eigenvalue(cov2d: np.ndarray) -> np.ndarray:
    a, b, c = cov2d[..., 0, 0], cov2d[..., 0, 1], cov2d[..., 1, 1]
    mid = 0.5 * (a + c)
    return mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))


def _cull_mask(mean2d, cov2d, z, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Visibility and 3-sigma screen radius for projected Gaussians."""
    with np.errstate(invalid="ignore"):
        det = cov2d[..., 0, 0] * cov2d[..., 1, 1] - cov2d[..., 0, 1] * cov2d[..., 1, 0]
        radius = 3.0 * np.sqrt(np.maximum(_max_eigenvalue(cov2d), 0.0))
        finite = np.isfinite(det) & np.all(np.isfinite(mean2d), axis=-1) & np.isfinite(radius)
        visible = (z > NEAR_PLANE) & finite & (det > 0.0)
        u, v = mean2d[..., 0], mean2d[..., 1]
        inside = (u + radius >= 0) & (u - radius <= camera.width) & (v + radius >= 0) & (v - radius <= camera.height)
    return visible & inside, np.where(visible, radius, 0.0)


def project_gaussian(mean, cov3d, camera: Camera):
    """EWA projection of one Gaussian.

    Returns ``(mean2d, cov2d, z)``, or ``None`` when the Gaussian is culled
    (behind the near plane, more than 3 sigma outside the image, or degenerate).
    """
    mean = np.asarray(mean, dtype=np.float64)
    cov3d = np.asarray(cov3d, dtype=np.float64)
    p_cam = camera.world_to_camera(mean)
    if not p_cam[2] > NEAR_PLANE:
        return None
    mean2d, cov2d, _, _ = _ewa(p_cam, cov3d, camera)
    visible, _ = _cull_mask(mean2d, cov2d, p_cam[2], camera)
    if not visible:
        return None
    return mean2d, cov2d, float(p_cam[2])


def eval_gaussian_2d(x, mean2d, cov2d) -> float:
    """Untruncated footprint exp(-0.5 (x - mu)^T cov^-1 (x - mu)); 0 if cov is singular."""
    cov2d = np.asarray(cov2d, dtype=np.float64)
    det = cov2d[0, 0] * cov2d[1, 1] - cov2d[0, 1] * cov2d[1, 0]
    if not np.isfinite(det) or abs(det) < 1e-300:
        return 0.0
    inv = np.array([[cov2d[1, 1], -cov2d[0, 1]], [-cov2d[1, 0], cov2d[0, 0]]]) / det
    d = np.asarray(x, dtype=np.float64) - np.asarray(mean2d, dtype=np.float64)
    return float(np.exp(-0.5 * d @ inv @ d))


# ---------------------------------------------------------------------------
# batched projection


@dataclass
class Projection:
    means2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2)
    conics: np.ndarray  # (N, 2, 2)
    depths: np.ndarray  # (N,) camera z
    radii: np.ndarray  # (N,)
    visible: np.ndarray  # (N,) bool
    colors: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    # retained for the backward pass
    p_cam: np.ndarray = field(repr=False)
    jac: np.ndarray = field(repr=False)
    t: np.ndarray = field(repr=False)
    cov3d: np.ndarray = field(repr=False)
    rotmats: np.ndarray = field(repr=False)
    scales: np.ndarray = field(repr=False)
    dirs: np.ndarray = field(repr=False)
    dir_norm: np.ndarray = field(repr=False)
    sh_basis: np.ndarray = field(repr=False)
    color_active: np.ndarray = field(repr=False)


def project_cloud(cloud: GaussianCloud, camera: Camera) -> Projection:
    q = cloud.rotations / np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
    rotmats = quat_to_rotmat(q)
    scales = np.exp(cloud.log_scales)
    m = rotmats * scales[:, None, :]
    cov3d = m @ np.swapaxes(m, 1, 2)
    p_cam = camera.world_to_camera(cloud.positions)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        means2d, cov2d, jac, t = _ewa(p_cam, cov3d, camera)
    visible, radii = _cull_mask(means2d, cov2d, p_cam[:, 2], camera)
    with np.errstate(divide="ignore", invalid="ignore"):
        det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
        conics = np.empty_like(cov2d)
        conics[:, 0, 0] = cov2d[:, 1, 1] / det
        conics[:, 1, 1] = cov2d[:, 0, 0] / det
        conics[:, 0, 1] = -cov2d[:, 0, 1] / det
        conics[:, 1, 0] = -cov2d[:, 1, 0] / det
    conics[~visible] = 0.0

    rel = cloud.positions - camera.center
    dir_norm = np.linalg.norm(rel, axis=1)
    dirs = rel / np.maximum(dir_norm, 1e-12)[:, None]
    k = cloud.sh_coeffs.shape[1]
    basis = sh_basis(dirs, k)
    raw = np.einsum("nk,nkc->nc", basis, cloud.sh_coeffs) + 0.5
    return Projection(
        means2d=means2d,
        cov2d=cov2d,
        conics=conics,
        depths=p_cam[:, 2].copy(),
        radii=radii,
        visible=visible,
        colors=np.maximum(raw, 0.0),
        opacities=sigmoid(cloud.opacity_logits),
        p_cam=p_cam,
        jac=jac,
        t=t,
        cov3d=cov3d,
        rotmats=rotmats,
        scales=scales,
        dirs=dirs,
        dir_norm=dir_norm,
        sh_basis=basis,
        color_active=raw > 0.0,
    )


def sorted_visible(proj: Projection) -> np.ndarray:
    """Visible indices in ascending depth, ties broken by storage index."""
    idx = np.flatnonzero(proj.visible)
    order = np.lexsort((idx, proj.depths[idx]))
    return idx[order]


# ---------------------------------------------------------------------------
# rasterization


@dataclass
class _TileCache:
    rows: slice
    cols: slice
    idx: np.ndarray  # (m,) Gaussian indices, front to back
    dx: np.ndarray  # (m, P)
    dy: np.ndarray
    g: np.ndarray  # truncated footprint
    alpha: np.ndarray  # effective alpha (0 after termination)
    clamped: np.ndarray  # bool, alpha hit ALPHA_MAX
    t_excl: np.ndarray  # transmittance before each Gaussian
    t_final: np.ndarray  # (P,)
    weights: np.ndarray  # alpha * t_excl
    out: np.ndarray  # (P, 4) composited colour + depth numerator


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3) clean radiance
    depth: np.ndarray  # (H, W)
    alpha_accum: np.ndarray  # (H, W)
    contrib_count: np.ndarray  # (H, W) int
    projection: Projection = field(repr=False)
    depth_numerator: np.ndarray = field(repr=False)
    tiles: list = field(default_factory=list, repr=False)
    termination: float = TERMINATION_T


def _tile_lists(proj: Projection, order: np.ndarray, camera: Camera, tile_size: int):
    u = proj.means2d[order, 0]
    v = proj.means2d[order, 1]
    r = proj.radii[order] + _TILE_MARGIN
    tiles = []
    for y0 in range(0, camera.height, tile_size):
        y1 = min(y0 + tile_size, camera.height)
        hit_y = (v + r >= y0 + 0.5) & (v - r <= y1 - 0.5)
        for x0 in range(0, camera.width, tile_size):
            x1 = min(x0 + tile_size, camera.width)
            hit = hit_y & (u + r >= x0 + 0.5) & (u - r <= x1 - 0.5)
            tiles.append((slice(y0, y1), slice(x0, x1), order[hit]))
    return tiles


def _blend_tile(proj: Projection, rows: slice, cols: slice, idx: np.ndarray, termination: float) -> _TileCache:
    xs = np.arange(cols.start, cols.stop) + 0.5
    ys = np.arange(rows.start, rows.stop) + 0.5
    px = np.tile(xs, len(ys))
    py = np.repeat(ys, len(xs))
    dx = px[None, :] - proj.means2d[idx, 0][:, None]
    dy = py[None, :] - proj.means2d[idx, 1][:, None]
    c00 = proj.conics[idx, 0, 0][:, None]
    c01 = proj.conics[idx, 0, 1][:, None]
    c11 = proj.conics[idx, 1, 1][:, None]
    q = c00 * dx * dx + 2.0 * c01 * dx * dy + c11 * dy * dy
    g = np.exp(-0.5 * q)
    g[q > MAHALANOBIS_CUTOFF] = 0.0
    raw_alpha = proj.opacities[idx][:, None] * g
    clamped = raw_alpha > ALPHA_MAX
    alpha = np.minimum(raw_alpha, ALPHA_MAX)

    keep = np.cumprod(1.0 - alpha, axis=0) >= termination
    alpha = np.where(keep, alpha, 0.0)
    t_incl = np.cumprod(1.0 - alpha, axis=0)
    t_excl = np.empty_like(t_incl)
    t_excl[:1] = 1.0
    t_excl[1:] = t_incl[:-1]
    weights = alpha * t_excl
    feats = np.concatenate([proj.colors[idx], proj.depths[idx][:, None]], axis=1)  # (m, 4)
    npix = px.size
    if len(idx):
        out = np.cumsum(weights[:, :, None] * feats[:, None, :], axis=0)[-1]
        t_final = t_incl[-1]
    else:
        out = np.zeros((npix, 4))
        t_final = np.ones(npix)
    return _TileCache(rows, cols, idx, dx, dy, g, alpha, clamped, t_excl, t_final, weights, out)


def rasterize(
    cloud: GaussianCloud,
    camera: Camera,
    *,
    termination: float = TERMINATION_T,
    tile_size: int = TILE_SIZE,
    threads: int | None = None,
) -> RenderOutput:
    """Render clean colour, expected depth and accumulated opacity.

    ``termination`` is the transmittance below which blending stops; pass 0 to
    disable early termination.
    """
    proj = project_cloud(cloud, camera)
    order = sorted_visible(proj)
    specs = _tile_lists(proj, order, camera, tile_size)
    threads = default_threads() if threads is None else threads
    if threads > 1 and len(specs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            tiles = list(pool.map(lambda s: _blend_tile(proj, *s, termination), specs))
    else:
        tiles = [_blend_tile(proj, *s, termination) for s in specs]

    h, w = camera.height, camera.width
    color = np.zeros((h, w, 3))
    numer = np.zeros((h, w))
    alpha = np.zeros((h, w))
    count = np.zeros((h, w), dtype=np.int64)
    for tile in tiles:
        shape = (tile.rows.stop - tile.rows.start, tile.cols.stop - tile.cols.start)
        color[tile.rows, tile.cols] = tile.out[:, :3].reshape(shape + (3,))
        numer[tile.rows, tile.cols] = tile.out[:, 3].reshape(shape)
        alpha[tile.rows, tile.cols] = (1.0 - tile.t_final).reshape(shape)
        count[tile.rows, tile.cols] = np.count_nonzero(tile.alpha > 0.0, axis=0).reshape(shape)
    depth = numer / np.maximum(alpha, DEPTH_EPS)
    return RenderOutput(color, depth, alpha, count, proj, numer, tiles, termination)


def rasterize_bruteforce(cloud: GaussianCloud, camera: Camera, *, termination: float = 0.0) -> RenderOutput:
    """Untiled per-pixel reference blend, evaluating every visible Gaussian at every pixel."""
    proj = project_cloud(cloud, camera)
    order = sorted_visible(proj)
    h, w = camera.height, camera.width
    color = np.zeros((h, w, 3))
    numer = np.zeros((h, w))
    alpha_acc = np.zeros((h, w))
    count = np.zeros((h, w), dtype=np.int64)
    u = proj.means2d[order, 0]
    v = proj.means2d[order, 1]
    c00 = proj.conics[order, 0, 0]
    c01 = proj.conics[order, 0, 1]
    c11 = proj.conics[order, 1, 1]
    opac = proj.opacities[order]
    cols = proj.colors[order]
    zs = proj.depths[order]
    for i in range(h):
        for j in range(w):
            dx = (j + 0.5) - u
            dy = (i + 0.5) - v
            q = c00 * dx * dx + 2.0 * c01 * dx * dy + c11 * dy * dy
            g = np.exp(-0.5 * q)
            g[q > MAHALANOBIS_CUTOFF] = 0.0
            alphas = np.minimum(opac * g, ALPHA_MAX)
            t = 1.0
            acc = [0.0, 0.0, 0.0, 0.0]
            n = 0
            for k in range(len(order)):
                a = float(alphas[k])
                if t * (1.0 - a) < termination:
                    break
                wgt = a * t
                acc[0] += wgt * cols[k, 0]
                acc[1] += wgt * cols[k, 1]
                acc[2] += wgt * cols[k, 2]
                acc[3] += wgt * zs[k]
                t = t * (1.0 - a)
                n += a > 0.0
            color[i, j] = acc[:3]
            numer[i, j] = acc[3]
            alpha_acc[i, j] = 1.0 - t
            count[i, j] = n
    depth = numer / np.maximum(alpha_acc, DEPTH_EPS)
    return RenderOutput(color, depth, alpha_acc, count, proj, numer, [], termination)


# ---------------------------------------------------------------------------
# backward


@dataclass
class ProjectionGrads:
    means2d: np.ndarray  # (N, 2) view-space gradient, also used for densification stats
    conics: np.ndarray  # (N, 2, 2)
    depths: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,) w.r.t. sigmoid(opacity)


def _tile_backward(proj: Projection, tile: _TileCache, g_out: np.ndarray, g_alpha: np.ndarray):
    idx = tile.idx
    if len(idx) == 0:
        return None
    feats = np.concatenate([proj.colors[idx], proj.depths[idx][:, None]], axis=1)
    contrib = tile.weights[:, :, None] * feats[:, None, :]
    suffix = tile.out[None, :, :] - np.cumsum(contrib, axis=0)  # sum over later Gaussians
    inv_one_minus = 1.0 / (1.0 - tile.alpha)
    d_alpha = np.einsum("pc,mpc->mp", g_out, tile.t_excl[:, :, None] * feats[:, None, :] - suffix * inv_one_minus[:, :, None])
    d_alpha += g_alpha[None, :] * tile.t_final[None, :] * inv_one_minus
    d_alpha[tile.alpha == 0.0] = 0.0
    d_alpha[tile.clamped] = 0.0
    d_feats = tile.weights @ g_out  # (m, 4)

    opac = proj.opacities[idx][:, None]
    d_opac = np.sum(d_alpha * tile.g, axis=1)
    d_q = -0.5 * tile.g * (d_alpha * opac)
    dx, dy = tile.dx, tile.dy
    c00 = proj.conics[idx, 0, 0][:, None]
    c01 = proj.conics[idx, 0, 1][:, None]
    c11 = proj.conics[idx, 1, 1][:, None]
    d_conic = np.empty((len(idx), 2, 2))
    d_conic[:, 0, 0] = np.sum(d_q * dx * dx, axis=1)
    d_conic[:, 0, 1] = d_conic[:, 1, 0] = np.sum(d_q * dx * dy, axis=1)
    d_conic[:, 1, 1] = np.sum(d_q * dy * dy, axis=1)
    d_mean = np.stack(
        [-np.sum(d_q * (2.0 * c00 * dx + 2.0 * c01 * dy), axis=1), -np.sum(d_q * (2.0 * c01 * dx + 2.0 * c11 * dy), axis=1)],
        axis=1,
    )
    return idx, d_feats, d_opac, d_conic, d_mean


def rasterize_backward(render: RenderOutput, d_color: np.ndarray, d_depth: np.ndarray, d_alpha: np.ndarray | None = None, threads: int | None = None) -> ProjectionGrads:
    """Pull image-space gradients back to per-Gaussian screen-space quantities."""
    proj = render.projection
    n = proj.means2d.shape[0]
    if d_alpha is None:
        d_alpha = np.zeros_like(render.alpha_accum)
    safe = render.alpha_accum > DEPTH_EPS
    denom = np.maximum(render.alpha_accum, DEPTH_EPS)
    d_numer = d_depth / denom
    d_acc = d_alpha - np.where(safe, d_depth * render.depth_numerator / (denom * denom), 0.0)

    def run(tile):
        g_out = np.concatenate([d_color[tile.rows, tile.cols].reshape(-1, 3), d_numer[tile.rows, tile.cols].reshape(-1, 1)], axis=1)
        return _tile_backward(proj, tile, g_out, d_acc[tile.rows, tile.cols].reshape(-1))

    threads = default_threads() if threads is None else threads
    if threads > 1 and len(render.tiles) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, render.tiles))
    else:
        parts = [run(t) for t in render.tiles]

    grads = ProjectionGrads(np.zeros((n, 2)), np.zeros((n, 2, 2)), np.zeros(n), np.zeros((n, 3)), np.zeros(n))
    for part in parts:  # fixed tile order keeps accumulation deterministic
        if part is None:
            continue
        idx, d_feats, d_opac, d_conic, d_mean = part
        np.add.at(grads.colors, idx, d_feats[:, :3])
        np.add.at(grads.depths, idx, d_feats[:, 3])
        np.add.at(grads.opacities, idx, d_opac)
        np.add.at(grads.conics, idx, d_conic)
        np.add.at(grads.means2d, idx, d_mean)
    return grads


@dataclass
class CloudGrads:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    sh_coeffs: np.ndarray
    opacity_logits: np.ndarray


def projection_backward(cloud: GaussianCloud, camera: Camera, proj: Projection, g: ProjectionGrads) -> CloudGrads:
    """Chain screen-space gradients through EWA projection, covariance and SH colour."""
    n = cloud.n
    vis = proj.visible
    d_pos = np.zeros((n, 3))
    d_logs = np.zeros((n, 3))
    d_rot = np.zeros((n, 4))
    d_sh = np.zeros_like(cloud.sh_coeffs)
    d_logit = np.zeros(n)
    if not np.any(vis):
        return CloudGrads(d_pos, d_logs, d_rot, d_sh, d_logit)

    i = np.flatnonzero(vis)
    op = proj.opacities[i]
    d_logit[i] = g.opacities[i] * op * (1.0 - op)

    # colour: c = max(sum_k Y_k(dir) sh_k + 0.5, 0)
    d_raw = g.colors[i] * proj.color_active[i]
    d_sh[i] = proj.sh_basis[i][:, :, None] * d_raw[:, None, :]
    k = cloud.sh_coeffs.shape[1]
    if k > 1:
        jac_sh = sh_basis_jacobian(proj.dirs[i], k)  # (m, k, 3)
        d_basis = np.einsum("mkc,mc->mk", cloud.sh_coeffs[i], d_raw)
        d_dir = np.einsum("mk,mka->ma", d_basis, jac_sh)
        dirs = proj.dirs[i]
        d_pos[i] += (d_dir - dirs * np.sum(dirs * d_dir, axis=1, keepdims=True)) / proj.dir_norm[i][:, None]

    # conic = inverse(cov2d)
    conic = proj.conics[i]
    d_cov2d = -conic @ g.conics[i] @ conic
    t = proj.t[i]
    cov3d = proj.cov3d[i]
    d_t = 2.0 * d_cov2d @ t @ cov3d
    d_cov3d = np.swapaxes(t, 1, 2) @ d_cov2d @ t
    d_jac = d_t @ camera.rotation.T

    x, y, z = proj.p_cam[i, 0], proj.p_cam[i, 1], proj.p_cam[i, 2]
    fx, fy = camera.fx, camera.fy
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    d_pc = np.zeros((len(i), 3))
    d_pc[:, 0] = g.means2d[i, 0] * fx * inv_z - d_jac[:, 0, 2] * fx * inv_z2
    d_pc[:, 1] = g.means2d[i, 1] * fy * inv_z - d_jac[:, 1, 2] * fy * inv_z2
    d_pc[:, 2] = (
        g.depths[i]
        - g.means2d[i, 0] * fx * x * inv_z2
        - g.means2d[i, 1] * fy * y * inv_z2
        - d_jac[:, 0, 0] * fx * inv_z2
        - d_jac[:, 1, 1] * fy * inv_z2
        + d_jac[:, 0, 2] * 2.0 * fx * x * inv_z2 * inv_z
        + d_jac[:, 1, 2] * 2.0 * fy * y * inv_z2 * inv_z
    )
    d_pos[i] += d_pc @ camera.rotation

    # cov3d = M M^T, M = R diag(s)
    rot = proj.rotmats[i]
    s = proj.scales[i]
    m = rot * s[:, None, :]
    d_m = 2.0 * d_cov3d @ m
    d_logs[i] = np.sum(d_m * rot, axis=1) * s
    d_r = d_m * s[:, None, :]
    q_raw = cloud.rotations[i]
    q_unit = q_raw / np.linalg.norm(q_raw, axis=1, keepdims=True)
    d_rot[i] = normalize_quat_grad(q_raw, rotmat_grad_to_quat(q_unit, d_r))
    return CloudGrads(d_pos, d_logs, d_rot, d_sh, d_logit)
