"""Image-quality metrics."""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError
from .losses import ssim_index

PSNR_CAP = 100.0


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give ``PSNR_CAP``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(a, b) -> float:
    return ssim_index(a, b)


def mean_feature_error(features: np.ndarray, memberships) -> float:
    """Mean of ||f_s - f_ref|| over all (region, member) pairs; NaN without members."""
    errs = [np.linalg.norm(features[np.asarray(idx)] - np.asarray(f_ref)[None, :], axis=1) for idx, f_ref in memberships if len(idx)]
    if not errs:
        return float("nan")
    return float(np.mean(np.concatenate(errs)))
