"""Underwater image formation: per-channel direct attenuation plus backscatter.

    observed = J * exp(-beta_d * z) + B_inf * (1 - exp(-beta_b * z))

The nine medium scalars are stored unconstrained (log betas, logit background).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .gaussian import logit, sigmoid

RESTORE_EPS = 1e-6


@dataclass
class MediumParams:
    log_beta_d: np.ndarray  # (3,)
    log_beta_b: np.ndarray  # (3,)
    b_inf_logit: np.ndarray  # (3,)

    def __post_init__(self):
        for name in ("log_beta_d", "log_beta_b", "b_inf_logit"):
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64).reshape(3))

    @classmethod
    def from_physical(cls, beta_d, beta_b, b_inf) -> "MediumParams":
        with np.errstate(divide="ignore"):
            return cls(
                np.log(np.broadcast_to(np.asarray(beta_d, dtype=np.float64), (3,))),
                np.log(np.broadcast_to(np.asarray(beta_b, dtype=np.float64), (3,))),
                logit(np.broadcast_to(np.asarray(b_inf, dtype=np.float64), (3,))),
            )

    @property
    def beta_d(self) -> np.ndarray:
        return np.exp(self.log_beta_d)

    @property
    def beta_b(self) -> np.ndarray:
        return np.exp(self.log_beta_b)

    @property
    def b_inf(self) -> np.ndarray:
        return sigmoid(self.b_inf_logit)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.log_beta_d, self.log_beta_b, self.b_inf_logit])

    @classmethod
    def from_vector(cls, v) -> "MediumParams":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[0:3], v[3:6], v[6:9])

    def copy(self) -> "MediumParams":
        return MediumParams.from_vector(self.to_vector())


def _check_depth(depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth < 0):
        raise InvalidInputError("depth must be non-negative")
    return depth


def transmission(beta, depth) -> np.ndarray:
    """exp(-beta_c * z) per channel, shape depth.shape + (3,)."""
    depth = _check_depth(depth)
    beta = np.asarray(beta, dtype=np.float64)
    return np.exp(-beta * depth[..., None])


def _check_shapes(image: np.ndarray, depth: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[-1] != 3 or image.shape[:2] != depth.shape:
        raise InvalidInputError(f"image {image.shape} and depth {depth.shape} do not match")


def apply_medium(clean, depth, medium: MediumParams) -> np.ndarray:
    clean = np.asarray(clean, dtype=np.float64)
    depth = _check_depth(depth)
    _check_shapes(clean, depth)
    t_d = transmission(medium.beta_d, depth)
    t_b = transmission(medium.beta_b, depth)
    return clean * t_d + medium.b_inf * (1.0 - t_b)


def restore_true_color(observed, depth, medium: MediumParams) -> tuple[np.ndarray, np.ndarray]:
    """Invert the formation model.

    Returns ``(clean, unrecoverable)``; pixels whose direct transmission falls
    below 1e-6 in any channel are zeroed and flagged in the boolean mask.
    """
    observed = np.asarray(observed, dtype=np.float64)
    depth = _check_depth(depth)
    _check_shapes(observed, depth)
    t_d = transmission(medium.beta_d, depth)
    t_b = transmission(medium.beta_b, depth)
    unrecoverable = np.any(t_d <= RESTORE_EPS, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        clean = (observed - medium.b_inf * (1.0 - t_b)) / t_d
    clean = np.clip(clean, 0.0, 1.0)
    clean[unrecoverable] = 0.0
    return clean, unrecoverable


def apply_medium_backward(clean, depth, medium: MediumParams, d_observed):
    """Gradients of apply_medium w.r.t. clean image, depth and the 9 medium scalars."""
    beta_d, beta_b, b_inf = medium.beta_d, medium.beta_b, medium.b_inf
    t_d = np.exp(-beta_d * depth[..., None])
    t_b = np.exp(-beta_b * depth[..., None])
    d_clean = d_observed * t_d
    d_depth = np.sum(d_observed * (-beta_d * clean * t_d + b_inf * beta_b * t_b), axis=-1)
    z = depth[..., None]
    d_beta_d = np.sum(d_observed * (-z * clean * t_d), axis=(0, 1))
    d_beta_b = np.sum(d_observed * (b_inf * z * t_b), axis=(0, 1))
    d_b_inf = np.sum(d_observed * (1.0 - t_b), axis=(0, 1))
    d_medium = np.concatenate([d_beta_d * beta_d, d_beta_b * beta_b, d_b_inf * b_inf * (1.0 - b_inf)])
    return d_clean, d_depth, d_medium
