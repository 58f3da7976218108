"""Pinhole camera with a rigid world-to-camera transform (camera looks down +z)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # world -> camera, (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.fx, self.fy, self.cx, self.cy = (float(v) for v in (self.fx, self.fy, self.cx, self.cy))
        self.width, self.height = int(self.width), int(self.height)
        if self.width <= 0 or self.height <= 0:
            raise InvalidParameterError(f"camera resolution must be positive, got {self.width}x{self.height}")
        values = np.concatenate([self.rotation.ravel(), self.translation, [self.fx, self.fy, self.cx, self.cy]])
        if not np.all(np.isfinite(values)):
            raise InvalidParameterError("camera parameters must be finite")
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-6:
            raise InvalidParameterError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    @classmethod
    def look_at(cls, eye, target, *, focal: float, width: int, height: int, up=(0.0, -1.0, 0.0)) -> "Camera":
        """Camera at ``eye`` looking at ``target``; image y axis points along -up."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(focal, focal, width / 2.0, height / 2.0, width, height, rot, -rot @ eye)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        keys = {"fx", "fy", "cx", "cy", "width", "height", "rotation", "translation"}
        if set(d) != keys:
            raise InvalidParameterError(f"camera keys {sorted(d)} != {sorted(keys)}")
        return cls(**d)


def pixel_centers(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates; pixel (row i, col j) sits at (j + 0.5, i + 0.5)."""
    return np.arange(width) + 0.5, np.arange(height) + 0.5
