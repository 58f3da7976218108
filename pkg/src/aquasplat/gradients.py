"""Analytic backward pass from the composite loss to every parameter group,
and the central-difference checker that certifies it."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, NonFiniteGradientError
from .gaussian import GROUP_FIELDS, GaussianCloud
from .losses import (
    INTERPOLATED,
    LossBreakdown,
    LossParts,
    LossWeights,
    compose_final,
    depth_loss,
    depth_loss_grad,
    edge_smooth_grad,
    edge_smooth_loss,
    grey_world_grad,
    grey_world_loss,
    interp_frame_grads,
    l1_grad,
    l2_grad,
    photometric_terms,
    ssim_grad,
    ssim_index,
)
from .medium import MediumParams, apply_medium, apply_medium_backward
from .raster import TERMINATION_T, RenderOutput, projection_backward, rasterize, rasterize_backward
from .scene import View
from .semantics import membership_from_projection, semantic_loss

PARAM_GROUPS = ("position", "scale", "rotation", "sh", "opacity", "semantic", "medium")


@dataclass
class ParamGrads:
    d_positions: np.ndarray
    d_log_scales: np.ndarray
    d_rotations: np.ndarray
    d_sh: np.ndarray
    d_opacity_logits: np.ndarray
    d_semantic: np.ndarray
    d_medium: np.ndarray  # (9,) log_beta_d, log_beta_b, b_inf_logit
    d_log_gamma: float = 0.0
    viewspace: np.ndarray = field(default=None, repr=False)  # (N, 2) d loss / d mean2d
    visible: np.ndarray = field(default=None, repr=False)

    def group(self, name: str) -> np.ndarray:
        if name == "medium":
            return self.d_medium
        return getattr(self, _GRAD_FIELDS[name])


_GRAD_FIELDS = {
    "position": "d_positions",
    "scale": "d_log_scales",
    "rotation": "d_rotations",
    "sh": "d_sh",
    "opacity": "d_opacity_logits",
    "semantic": "d_semantic",
}


@dataclass
class ForwardState:
    render: RenderOutput
    observed: np.ndarray
    memberships: list
    breakdown: LossBreakdown


def _frame_scale(kind: str, weights: LossWeights, log_gamma: float) -> float:
    if kind != INTERPOLATED:
        return 1.0
    if weights.interp_mode == "fixed":
        return weights.interp_fixed_weight
    return 0.5 * float(np.exp(log_gamma))


def forward(
    cloud: GaussianCloud,
    view: View,
    medium: MediumParams,
    weights: LossWeights,
    *,
    l1_weight: float,
    l2_weight: float,
    stage: int = 1,
    termination: float = TERMINATION_T,
    log_gamma: float = 0.0,
    threads: int | None = None,
) -> ForwardState:
    """Render one view through the medium and evaluate every loss term."""
    render = rasterize(cloud, view.camera, termination=termination, threads=threads)
    observed = apply_medium(render.color, render.depth, medium)
    l1, l2 = photometric_terms(observed, view.image)
    ssim = ssim_index(observed, view.image) if weights.lambda_ssim > 0 else 1.0
    d_loss = 0.0
    if view.prior_depth is not None and weights.lambda_depth > 0:
        d_loss = depth_loss(render.depth, view.prior_depth, view.depth_mask)
    grey = grey_world_loss(render.color) if weights.lambda_g > 0 else 0.0
    smooth = edge_smooth_loss(render.depth, view.image) if weights.lambda_smooth > 0 else 0.0
    memberships = [(membership_from_projection(render.projection, r), r.f_ref) for r in view.regions]
    sem, _ = semantic_loss(cloud.semantic_features, memberships, weights.semantic_reduction)
    parts = LossParts(l1=l1, ssim=ssim, l2=l2, depth=d_loss, grey=grey, smooth=smooth, semantic=sem)
    bd = compose_final(parts, weights, l1_weight, l2_weight, stage, view.kind)
    if view.kind == INTERPOLATED:
        if weights.interp_mode == "fixed":
            bd.l_frame = weights.interp_fixed_weight * bd.l_final
        else:
            gamma = float(np.exp(log_gamma))
            bd.l_frame = 0.5 * gamma * bd.l_final - 0.5 * weights.alpha_reg * log_gamma
    return ForwardState(render, observed, memberships, bd)


def backward_full(
    cloud: GaussianCloud,
    view: View,
    medium: MediumParams,
    weights: LossWeights,
    *,
    l1_weight: float,
    l2_weight: float,
    stage: int = 1,
    freeze: frozenset | set = frozenset(),
    termination: float = TERMINATION_T,
    log_gamma: float = 0.0,
    threads: int | None = None,
    check_finite: bool = True,
) -> tuple[LossBreakdown, ParamGrads]:
    """Loss breakdown and gradients for every parameter group on one view.

    Groups named in ``freeze`` get identically zero gradients.
    """
    st = forward(
        cloud, view, medium, weights, l1_weight=l1_weight, l2_weight=l2_weight, stage=stage,
        termination=termination, log_gamma=log_gamma, threads=threads,
    )
    render, observed, target = st.render, st.observed, view.image
    scale = _frame_scale(view.kind, weights, log_gamma)

    d_obs = l1_weight * l1_grad(observed, target) + l2_weight * l2_grad(observed, target)
    if weights.lambda_ssim > 0:
        d_obs = d_obs - 0.5 * weights.lambda_ssim * ssim_grad(observed, target)
    d_obs *= scale
    d_clean, d_depth, d_medium = apply_medium_backward(render.color, render.depth, medium, d_obs)
    if weights.lambda_g > 0:
        d_clean += scale * weights.lambda_g * grey_world_grad(render.color)
    if view.prior_depth is not None and weights.lambda_depth > 0:
        d_depth += scale * weights.lambda_depth * depth_loss_grad(render.depth, view.prior_depth, view.depth_mask)
    if weights.lambda_smooth > 0:
        d_depth += scale * weights.lambda_smooth * edge_smooth_grad(render.depth, target)

    screen = rasterize_backward(render, d_clean, d_depth, threads=threads)
    cg = projection_backward(cloud, view.camera, render.projection, screen)
    _, d_sem = semantic_loss(cloud.semantic_features, st.memberships, weights.semantic_reduction)
    d_sem *= scale * weights.lambda_s

    d_log_gamma = 0.0
    if view.kind == INTERPOLATED and weights.interp_mode == "learned":
        gamma = float(np.exp(log_gamma))
        _, d_gamma = interp_frame_grads(st.breakdown.l_final, gamma, weights.alpha_reg)
        d_log_gamma = d_gamma * gamma

    grads = ParamGrads(
        d_positions=cg.positions,
        d_log_scales=cg.log_scales,
        d_rotations=cg.rotations,
        d_sh=cg.sh_coeffs,
        d_opacity_logits=cg.opacity_logits,
        d_semantic=d_sem,
        d_medium=d_medium,
        d_log_gamma=d_log_gamma,
        viewspace=screen.means2d,
        visible=render.projection.visible,
    )
    for name in freeze:
        if name not in _GRAD_FIELDS:
            raise InvalidParameterError(f"unknown parameter group {name!r}")
        grads.group(name)[...] = 0.0
    if check_finite:
        _check_finite(grads)
    return st.breakdown, grads


def _check_finite(grads: ParamGrads) -> None:
    for name in PARAM_GROUPS:
        arr = grads.group(name)
        bad = ~np.isfinite(arr)
        if np.any(bad):
            index = int(np.argwhere(bad)[0][0])
            raise NonFiniteGradientError(name, index)


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    group: str
    max_rel_err: float
    worst_index: tuple
    n_checked: int
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


@dataclass
class GradCheckScene:
    cloud: GaussianCloud
    view: View
    medium: MediumParams
    weights: LossWeights
    l1_weight: float = 0.8
    l2_weight: float = 0.5
    stage: int = 1


def grad_check(scene: GradCheckScene, group: str, epsilon: float = 1e-5, freeze=frozenset()) -> GradCheckReport:
    """Compare the analytic gradient of one parameter group with central differences.

    Early termination is disabled on both sides so the loss is piecewise smooth.
    """
    if group not in PARAM_GROUPS:
        raise InvalidParameterError(f"unknown parameter group {group!r}; expected one of {PARAM_GROUPS}")
    kw = dict(l1_weight=scene.l1_weight, l2_weight=scene.l2_weight, stage=scene.stage, termination=0.0, threads=1)
    _, grads = backward_full(scene.cloud, scene.view, scene.medium, scene.weights, freeze=freeze, **kw)
    analytic = grads.group(group).copy()

    cloud = scene.cloud.copy()
    medium_vec = scene.medium.to_vector()
    target = medium_vec if group == "medium" else getattr(cloud, GROUP_FIELDS[group])

    def loss() -> float:
        med = MediumParams.from_vector(medium_vec)
        return forward(cloud, scene.view, med, scene.weights, **kw).breakdown.l_frame

    numeric = np.zeros_like(target)
    flat = target.reshape(-1)
    num_flat = numeric.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + epsilon
        up = loss()
        flat[k] = orig - epsilon
        down = loss()
        flat[k] = orig
        num_flat[k] = (up - down) / (2.0 * epsilon)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
    return GradCheckReport(group, float(rel[worst]), tuple(int(i) for i in worst), rel.size, analytic, numeric)


def standard_gradcheck_scene(seed: int = 3) -> GradCheckScene:
    """12 broad Gaussians seen by one 8x8 camera, with every loss term active.

    SSIM is off: its 11x11 window does not fit an 8x8 image.  Footprints are wide
    enough that no pixel falls outside any 3-sigma ellipse and opacities stay
    below the alpha clamp, so the loss is smooth around the evaluation point.
    """
    from .camera import Camera
    from .semantics import SemanticRegion

    rng = np.random.default_rng(seed)
    n, size = 12, 8
    camera = Camera.look_at([0.15, -0.1, -3.0], [0.0, 0.0, 0.0], focal=8.0, width=size, height=size)
    cloud = GaussianCloud(
        positions=rng.uniform([-1.0, -1.0, -0.3], [1.0, 1.0, 0.3], (n, 3)),
        log_scales=np.log(rng.uniform(1.6, 2.6, (n, 3))),
        rotations=rng.normal(size=(n, 4)),
        sh_coeffs=rng.normal(0.0, 0.1, (n, 9, 3)),
        opacity_logits=rng.uniform(-2.2, -0.85, n),
        semantic_features=rng.normal(0.0, 0.3, (n, 32)),
    )
    cloud.normalize_rotations()
    medium = MediumParams.from_physical([0.2, 0.3, 0.4], [0.25, 0.15, 0.35], [0.1, 0.3, 0.4])

    other = cloud.copy()
    other.positions += rng.normal(0.0, 0.1, other.positions.shape)
    other.sh_coeffs += rng.normal(0.0, 0.1, other.sh_coeffs.shape)
    ref = rasterize(other, camera, termination=0.0)
    target = np.clip(apply_medium(ref.color, ref.depth, medium) + rng.normal(0.0, 0.02, (size, size, 3)), 0.0, 1.0)
    prior = ref.depth + rng.normal(0.0, 0.05, (size, size))
    mask = rng.random((size, size)) > 0.3
    f_ref = rng.normal(size=32)
    region = SemanticRegion("gradcheck", (1.0, 1.0, 6.0, 6.0), f_ref / np.linalg.norm(f_ref))
    view = View(camera, target, "keyframe", prior, mask, [region], "gradcheck")
    weights = LossWeights(lambda_ssim=0.0)
    return GradCheckScene(cloud, view, medium, weights, l1_weight=0.8, l2_weight=0.5)
