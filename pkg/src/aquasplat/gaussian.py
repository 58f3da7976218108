"""Gaussian primitive parameterization: covariances and SH colour."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import InvalidParameterError

SEMANTIC_DIM = 32
DEFAULT_SH_DEGREE = 2

GROUPS = ("position", "scale", "rotation", "sh", "opacity", "semantic")
FREEZABLE = frozenset({"position", "rotation", "scale", "semantic"})

# field name on GaussianCloud for each parameter group
GROUP_FIELDS = {
    "position": "positions",
    "scale": "log_scales",
    "rotation": "rotations",
    "sh": "sh_coeffs",
    "opacity": "opacity_logits",
    "semantic": "semantic_features",
}


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianCloud:
    positions: np.ndarray  # (N, 3)
    log_scales: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) unit quaternions, (w, x, y, z)
    sh_coeffs: np.ndarray  # (N, K, 3)
    opacity_logits: np.ndarray  # (N,)
    semantic_features: np.ndarray  # (N, SEMANTIC_DIM)

    def __post_init__(self):
        for f in fields(self):
            arr = np.ascontiguousarray(getattr(self, f.name), dtype=np.float64)
            if not arr.flags.writeable:  # e.g. broadcast views; the optimizer updates in place
                arr = arr.copy()
            setattr(self, f.name, arr)
        self.validate()

    def validate(self) -> None:
        n = self.positions.shape[0]
        expected = {
            "positions": (n, 3),
            "log_scales": (n, 3),
            "rotations": (n, 4),
            "opacity_logits": (n,),
            "semantic_features": (n, SEMANTIC_DIM),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise InvalidParameterError(f"{name} has shape {arr.shape}, expected {shape}")
        if self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[0] != n or self.sh_coeffs.shape[2] != 3:
            raise InvalidParameterError(f"sh_coeffs has shape {self.sh_coeffs.shape}")
        sh_degree_for_count(self.sh_coeffs.shape[1])

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return sh_degree_for_count(self.sh_coeffs.shape[1])

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def group(self, name: str) -> np.ndarray:
        return getattr(self, GROUP_FIELDS[name])

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def select(self, index) -> "GaussianCloud":
        return GaussianCloud(**{f.name: getattr(self, f.name)[index] for f in fields(self)})

    @staticmethod
    def concat(clouds: list["GaussianCloud"]) -> "GaussianCloud":
        return GaussianCloud(
            **{f.name: np.concatenate([getattr(c, f.name) for c in clouds]) for f in fields(GaussianCloud)}
        )

    def normalize_rotations(self) -> None:
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)

    @classmethod
    def create(
        cls,
        positions,
        scales,
        colors,
        opacities,
        rotations=None,
        sh_degree: int = DEFAULT_SH_DEGREE,
    ) -> "GaussianCloud":
        """Build a cloud from activated values; colours become the DC SH term."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = positions.shape[0]
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3))
        if rotations is None:
            rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
        sh[:, 0, :] = rgb_to_sh_dc(np.broadcast_to(np.asarray(colors, dtype=np.float64), (n, 3)))
        op = np.broadcast_to(np.asarray(opacities, dtype=np.float64), (n,))
        return cls(
            positions=positions,
            log_scales=np.log(scales),
            rotations=rotations,
            sh_coeffs=sh,
            opacity_logits=logit(op),
            semantic_features=np.zeros((n, SEMANTIC_DIM)),
        )


# ---------------------------------------------------------------------------
# rotations and covariances


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions (w, x, y, z); works on (..., 4)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    r = np.empty(w.shape + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotmat_grad_to_quat(q: np.ndarray, d_r: np.ndarray) -> np.ndarray:
    """Pull dL/dR (..., 3, 3) back to the unit quaternion (..., 4)."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    g = d_r
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0] - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (
        y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1] - w * g[..., 1, 2]
        + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2]
    )
    dy = 2 * (
        -2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0] + z * g[..., 1, 2]
        - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2]
    )
    dz = 2 * (
        -2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0] - 2 * z * g[..., 1, 1]
        + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1]
    )
    return np.stack([dw, dx, dy, dz], axis=-1)


def normalize_quat_grad(q_raw: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    """Gradient through q -> q / |q| for raw quaternion components."""
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    unit = q_raw / norm
    return (d_unit - unit * np.sum(unit * d_unit, axis=-1, keepdims=True)) / norm


def build_covariance(log_scale, rotation) -> np.ndarray:
    """Covariance R diag(s)^2 R^T of one Gaussian.

    ``rotation`` must be a unit quaternion (w, x, y, z) to within 1e-6.
    """
    log_scale = np.asarray(log_scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if log_scale.shape != (3,) or rotation.shape != (4,):
        raise InvalidParameterError("expected log_scale of shape (3,) and rotation of shape (4,)")
    if not (np.all(np.isfinite(log_scale)) and np.all(np.isfinite(rotation))):
        raise InvalidParameterError("non-finite covariance parameters")
    if abs(np.linalg.norm(rotation) - 1.0) > 1e-6:
        raise InvalidParameterError(f"rotation quaternion not unit norm: |q| = {np.linalg.norm(rotation)}")
    return covariances(log_scale[None], rotation[None])[0]


def covariances(log_scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Batched covariances; rotations are normalized here, not validated."""
    q = rotations / np.linalg.norm(rotations, axis=-1, keepdims=True)
    m = quat_to_rotmat(q) * np.exp(log_scales)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


# ---------------------------------------------------------------------------
# spherical harmonics

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

# Each real SH basis function as a polynomial in (x, y, z): {(px, py, pz): coefficient}.
_SH_POLYS: list[dict[tuple[int, int, int], float]] = [
    {(0, 0, 0): SH_C0},
    {(0, 1, 0): -SH_C1},
    {(0, 0, 1): SH_C1},
    {(1, 0, 0): -SH_C1},
    {(1, 1, 0): SH_C2[0]},
    {(0, 1, 1): SH_C2[1]},
    {(0, 0, 2): 2 * SH_C2[2], (2, 0, 0): -SH_C2[2], (0, 2, 0): -SH_C2[2]},
    {(1, 0, 1): SH_C2[3]},
    {(2, 0, 0): SH_C2[4], (0, 2, 0): -SH_C2[4]},
    {(2, 1, 0): 3 * SH_C3[0], (0, 3, 0): -SH_C3[0]},
    {(1, 1, 1): SH_C3[1]},
    {(0, 1, 2): 4 * SH_C3[2], (2, 1, 0): -SH_C3[2], (0, 3, 0): -SH_C3[2]},
    {(0, 0, 3): 2 * SH_C3[3], (2, 0, 1): -3 * SH_C3[3], (0, 2, 1): -3 * SH_C3[3]},
    {(1, 0, 2): 4 * SH_C3[4], (3, 0, 0): -SH_C3[4], (1, 2, 0): -SH_C3[4]},
    {(2, 0, 1): SH_C3[5], (0, 2, 1): -SH_C3[5]},
    {(3, 0, 0): SH_C3[6], (1, 2, 0): -3 * SH_C3[6]},
]


def sh_degree_for_count(k: int) -> int:
    degree = int(round(np.sqrt(k))) - 1
    if degree < 0 or degree > 3 or (degree + 1) ** 2 != k:
        raise InvalidParameterError(f"{k} is not a valid SH coefficient count for degree 0..3")
    return degree


def _powers(dirs: np.ndarray) -> np.ndarray:
    # (..., 3, 4): component ** 0..3
    return dirs[..., :, None] ** np.arange(4)


def sh_basis(dirs: np.ndarray, k: int) -> np.ndarray:
    """Basis values Y_0..Y_{k-1} at directions (..., 3) -> (..., k)."""
    p = _powers(np.asarray(dirs, dtype=np.float64))
    out = np.zeros(p.shape[:-2] + (k,))
    for j, poly in enumerate(_SH_POLYS[:k]):
        for (a, b, c), coef in poly.items():
            out[..., j] += coef * p[..., 0, a] * p[..., 1, b] * p[..., 2, c]
    return out


def sh_basis_jacobian(dirs: np.ndarray, k: int) -> np.ndarray:
    """d Y_j / d dir, shape (..., k, 3), treating (x, y, z) as free variables."""
    p = _powers(np.asarray(dirs, dtype=np.float64))
    out = np.zeros(p.shape[:-2] + (k, 3))
    for j, poly in enumerate(_SH_POLYS[:k]):
        for exps, coef in poly.items():
            for axis in range(3):
                e = exps[axis]
                if e == 0:
                    continue
                term = coef * e
                for other in range(3):
                    power = exps[other] - 1 if other == axis else exps[other]
                    term = term * p[..., other, power]
                out[..., j, axis] += term
    return out


def eval_sh_color(sh_coeffs, view_dir) -> np.ndarray:
    """View-dependent RGB of one Gaussian: max(sum_k c_k Y_k(v) + 0.5, 0)."""
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    view_dir = np.asarray(view_dir, dtype=np.float64)
    if sh_coeffs.ndim != 2 or sh_coeffs.shape[1] != 3:
        raise InvalidParameterError(f"sh_coeffs must be (K, 3), got {sh_coeffs.shape}")
    sh_degree_for_count(sh_coeffs.shape[0])
    return np.maximum(sh_basis(view_dir, sh_coeffs.shape[0]) @ sh_coeffs + 0.5, 0.0)


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sh_dc_to_rgb(dc):
    return np.asarray(dc, dtype=np.float64) * SH_C0 + 0.5
