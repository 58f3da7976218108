"""Loss terms, their image-space gradients, and the staged composite objective.

Every ``*_grad`` helper returns the gradient of the corresponding scalar with
respect to its first (rendered) argument.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidInputError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

KEYFRAME = "keyframe"
INTERPOLATED = "interpolated"
FRAME_KINDS = (KEYFRAME, INTERPOLATED)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# photometric


def photometric_terms(rendered, target) -> tuple[float, float]:
    """Mean absolute and mean squared difference over all pixels and channels."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _same_shape(rendered, target)
    diff = rendered - target
    return float(np.mean(np.abs(diff))), float(np.mean(diff * diff))


def l1_grad(rendered, target) -> np.ndarray:
    # sign(0) = 0: zero residual is a stationary point
    return np.sign(rendered - target) / rendered.size


def l2_grad(rendered, target) -> np.ndarray:
    return 2.0 * (rendered - target) / rendered.size


# ---------------------------------------------------------------------------
# SSIM


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    h, w = x.shape[0] - k + 1, x.shape[1] - k + 1
    rows = sum(g[i] * x[i : i + h] for i in range(k))
    return sum(g[j] * rows[:, j : j + w] for j in range(k))


def _filter_valid_adjoint(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    h, w = y.shape[0], y.shape[1]
    cols = np.zeros((h, w + k - 1) + y.shape[2:])
    for j in range(k):
        cols[:, j : j + w] += g[j] * y
    out = np.zeros((h + k - 1,) + cols.shape[1:])
    for i in range(k):
        out[i : i + h] += g[i] * cols
    return out


def _ssim_stats(a: np.ndarray, b: np.ndarray):
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise InvalidInputError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    e_aa, e_bb, e_ab = _filter_valid(a * a, g), _filter_valid(b * b, g), _filter_valid(a * b, g)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    n1 = 2.0 * mu_a * mu_b + SSIM_C1
    n2 = 2.0 * cov + SSIM_C2
    d1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    d2 = var_a + var_b + SSIM_C2
    return a, b, g, mu_a, mu_b, n1, n2, d1, d2


def ssim_index(a, b) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, valid region) averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    *_, n1, n2, d1, d2 = _ssim_stats(a, b)
    return float(np.mean((n1 * n2) / (d1 * d2)))


def ssim_grad(a, b) -> np.ndarray:
    """d ssim_index(a, b) / d a."""
    squeeze = np.ndim(a) == 2
    a3, b3, g, mu_a, mu_b, n1, n2, d1, d2 = _ssim_stats(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    s = (n1 * n2) / (d1 * d2)
    w = 1.0 / s.size
    dd = d1 * d2
    d_mu = w * ((2.0 * mu_b * n2 - 2.0 * mu_b * n1) / dd - s * (2.0 * mu_a / d1 - 2.0 * mu_a / d2))
    d_eaa = w * (-s / d2)
    d_eab = w * (2.0 * n1 / dd)
    out = _filter_valid_adjoint(d_mu, g) + 2.0 * a3 * _filter_valid_adjoint(d_eaa, g) + b3 * _filter_valid_adjoint(d_eab, g)
    return out[..., 0] if squeeze else out


# ---------------------------------------------------------------------------
# reconstruction and auxiliary terms


def reconstruction_loss(rendered, target, l1_weight: float, lambda_ssim: float = 0.2) -> float:
    """l1_weight * l1 + lambda_ssim * (1 - SSIM) / 2."""
    l1, _ = photometric_terms(rendered, target)
    if lambda_ssim == 0.0:
        return l1_weight * l1
    return l1_weight * l1 + lambda_ssim * (1.0 - ssim_index(rendered, target)) / 2.0


def depth_loss(rendered_depth, prior_depth, valid_mask) -> float:
    rendered_depth = np.asarray(rendered_depth, dtype=np.float64)
    prior_depth = np.asarray(prior_depth, dtype=np.float64)
    valid_mask = np.asarray(valid_mask, dtype=bool)
    _same_shape(rendered_depth, prior_depth)
    n = np.count_nonzero(valid_mask)
    if n == 0:
        return 0.0
    return float(np.sum(np.abs(rendered_depth - prior_depth)[valid_mask]) / n)


def depth_loss_grad(rendered_depth, prior_depth, valid_mask) -> np.ndarray:
    n = np.count_nonzero(valid_mask)
    if n == 0:
        return np.zeros_like(rendered_depth)
    return np.where(valid_mask, np.sign(rendered_depth - prior_depth), 0.0) / n


def grey_world_loss(restored) -> float:
    """Sum over channels of (channel mean - 0.5)^2."""
    means = np.asarray(restored, dtype=np.float64).reshape(-1, 3).mean(axis=0)
    return float(np.sum((means - 0.5) ** 2))


def grey_world_grad(restored) -> np.ndarray:
    restored = np.asarray(restored, dtype=np.float64)
    npix = restored.size // 3
    means = restored.reshape(-1, 3).mean(axis=0)
    return np.broadcast_to(2.0 * (means - 0.5) / npix, restored.shape).copy()


def _edge_weights(image: np.ndarray):
    image = np.asarray(image, dtype=np.float64)
    wx = np.exp(-np.mean(np.abs(image[:, 1:] - image[:, :-1]), axis=-1))
    wy = np.exp(-np.mean(np.abs(image[1:] - image[:-1]), axis=-1))
    return wx, wy


def edge_smooth_loss(rendered_depth, target_image) -> float:
    """mean(|dx D| e^{-|dx I|}) + mean(|dy D| e^{-|dy I|}), image gradients channel-averaged."""
    d = np.asarray(rendered_depth, dtype=np.float64)
    if d.shape[0] < 2 or d.shape[1] < 2:
        raise InvalidInputError("edge-aware smoothness needs at least 2x2 pixels")
    wx, wy = _edge_weights(target_image)
    return float(np.mean(np.abs(d[:, 1:] - d[:, :-1]) * wx) + np.mean(np.abs(d[1:] - d[:-1]) * wy))


def edge_smooth_grad(rendered_depth, target_image) -> np.ndarray:
    d = np.asarray(rendered_depth, dtype=np.float64)
    wx, wy = _edge_weights(target_image)
    gx = np.sign(d[:, 1:] - d[:, :-1]) * wx / wx.size
    gy = np.sign(d[1:] - d[:-1]) * wy / wy.size
    out = np.zeros_like(d)
    out[:, 1:] += gx
    out[:, :-1] -= gx
    out[1:] += gy
    out[:-1] -= gy
    return out


# ---------------------------------------------------------------------------
# composition


@dataclass
class LossWeights:
    lambda_s: float = 0.1
    lambda_ssim: float = 0.2
    lambda_depth: float = 0.05
    lambda_g: float = 0.01
    lambda_smooth: float = 0.01
    alpha_reg: float = 1.0
    interp_fixed_weight: float = 0.1
    interp_mode: str = "fixed"  # "fixed" or "learned"
    semantic_reduction: str = "sum"

    def __post_init__(self):
        for name in ("lambda_s", "lambda_ssim", "lambda_depth", "lambda_g", "lambda_smooth", "alpha_reg", "interp_fixed_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.interp_mode not in ("fixed", "learned"):
            raise ValueError(f"interp_mode must be 'fixed' or 'learned', got {self.interp_mode!r}")
        if self.semantic_reduction not in ("sum", "mean"):
            raise ValueError(f"semantic_reduction must be 'sum' or 'mean', got {self.semantic_reduction!r}")


@dataclass
class LossParts:
    """Unweighted loss terms for one view."""

    l1: float = 0.0
    ssim: float = 1.0
    l2: float = 0.0
    depth: float = 0.0
    grey: float = 0.0
    smooth: float = 0.0
    semantic: float = 0.0


@dataclass
class LossBreakdown:
    l_rec: float
    l_depth: float
    l_g: float
    l_smooth: float
    l_s: float
    l_2: float
    l_final: float
    frame_kind: str = KEYFRAME
    stage: int = 1
    l1: float = 0.0
    ssim: float = 1.0
    l_frame: float = 0.0  # objective actually optimized (after interpolated-frame weighting)

    def as_dict(self) -> dict:
        return asdict(self)


def compose_final(parts: LossParts, weights: LossWeights, l1_weight: float, l2_weight: float, stage: int = 1, frame_kind: str = KEYFRAME) -> LossBreakdown:
    """L_final = L_rec + w_d L_depth + w_g L_g + w_sm L_smooth + lambda_s L_s + lambda_2 L_2.

    ``l1_weight`` and ``l2_weight`` are the stage-dependent photometric weights
    (see :func:`aquasplat.optim.stage_schedule`).
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    l_rec = l1_weight * parts.l1 + weights.lambda_ssim * (1.0 - parts.ssim) / 2.0
    l_final = (
        l_rec
        + weights.lambda_depth * parts.depth
        + weights.lambda_g * parts.grey
        + weights.lambda_smooth * parts.smooth
        + weights.lambda_s * parts.semantic
        + l2_weight * parts.l2
    )
    return LossBreakdown(
        l_rec=l_rec,
        l_depth=parts.depth,
        l_g=parts.grey,
        l_smooth=parts.smooth,
        l_s=parts.semantic,
        l_2=parts.l2,
        l_final=l_final,
        frame_kind=frame_kind,
        stage=stage,
        l1=parts.l1,
        ssim=parts.ssim,
        l_frame=l_final,
    )


def interp_frame_loss(l_total: float, gamma: float = 1.0, alpha_reg: float = 1.0, fixed_weight: float | None = None) -> float:
    """Loss for an interpolated frame.

    Learned mode: 0.5 * gamma * L - 0.5 * alpha * log(gamma).
    Fixed mode (``fixed_weight`` given): fixed_weight * L, no log term.
    """
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    if fixed_weight is not None:
        return fixed_weight * l_total
    return 0.5 * gamma * l_total - 0.5 * alpha_reg * np.log(gamma)


def interp_frame_grads(l_total: float, gamma: float, alpha_reg: float) -> tuple[float, float]:
    """(dL'/dL_total, dL'/dgamma) in learned mode."""
    return 0.5 * gamma, 0.5 * l_total - 0.5 * alpha_reg / gamma
