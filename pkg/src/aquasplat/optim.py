"""Adam updates, the two-stage freeze/reweight schedule, and adaptive density control."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AquasplatError, ConfigError
from .gaussian import FREEZABLE, GROUP_FIELDS, GaussianCloud, quat_to_rotmat

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


# ---------------------------------------------------------------------------
# stage schedule


@dataclass
class StageConfig:
    total_iterations: int = 20000
    stage_boundary_fraction: float = 0.6
    freeze_groups: frozenset = FREEZABLE
    stage1_l1_weight: float = 0.8
    stage2_l1_weight: float = 0.4
    stage1_l2_weight: float = 0.0
    stage2_l2_weight: float = 0.5
    enabled: bool = True  # False: stay in stage 1 for the whole run

    def __post_init__(self):
        self.freeze_groups = frozenset(self.freeze_groups)
        if not self.freeze_groups <= FREEZABLE:
            raise ConfigError(f"freeze_groups must be a subset of {sorted(FREEZABLE)}, got {sorted(self.freeze_groups)}")
        if not 0.0 < self.stage_boundary_fraction <= 1.0:
            raise ConfigError("stage_boundary_fraction must lie in (0, 1]")
        if self.total_iterations < 1:
            raise ConfigError("total_iterations must be positive")

    @property
    def boundary(self) -> int:
        # small slack so that e.g. 0.6 * 200 is not floored to 119
        return int(math.floor(self.stage_boundary_fraction * self.total_iterations + 1e-9))


@dataclass(frozen=True)
class StageInfo:
    stage: int
    freeze: frozenset
    l1_weight: float
    l2_weight: float
    densify: bool


def stage_schedule(iteration: int, config: StageConfig) -> StageInfo:
    """Stage, freeze mask and photometric weights for a 0-based iteration."""
    if not config.enabled or iteration < config.boundary:
        return StageInfo(1, frozenset(), config.stage1_l1_weight, config.stage1_l2_weight, True)
    return StageInfo(2, config.freeze_groups, config.stage2_l1_weight, config.stage2_l2_weight, False)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class LearningRates:
    position_init: float = 1.6e-4
    position_final: float = 1.6e-6
    sh: float = 2.5e-3
    opacity: float = 5e-2
    scale: float = 5e-3
    rotation: float = 1e-3
    semantic: float = 2.5e-3
    medium: float = 1e-3
    medium_final: float | None = None  # log-linear decay target; None keeps medium constant
    gamma: float = 1e-3


def _log_linear(step: int, max_steps: int, start: float, end: float) -> float:
    t = min(max(step / max(max_steps, 1), 0.0), 1.0)
    return math.exp((1.0 - t) * math.log(start) + t * math.log(end))


def position_lr(step: int, rates: LearningRates, max_steps: int, spatial_scale: float = 1.0) -> float:
    """Log-linear decay from ``position_init`` to ``position_final`` over ``max_steps``."""
    return spatial_scale * _log_linear(step, max_steps, rates.position_init, rates.position_final)


def group_lrs(step: int, rates: LearningRates, max_steps: int, spatial_scale: float = 1.0) -> dict[str, float]:
    return {
        "position": position_lr(step, rates, max_steps, spatial_scale),
        "scale": rates.scale,
        "rotation": rates.rotation,
        "sh": rates.sh,
        "opacity": rates.opacity,
        "semantic": rates.semantic,
        "medium": rates.medium if rates.medium_final is None else _log_linear(step, max_steps, rates.medium, rates.medium_final),
        "gamma": rates.gamma,
    }


@dataclass
class OptimizerState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    lrs: dict[str, float] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
            {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
        )

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            {k: v.copy() for k, v in self.first_moment.items()},
            {k: v.copy() for k, v in self.second_moment.items()},
            self.step_count,
            dict(self.lrs),
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState, lrs: dict[str, float], freeze=frozenset()) -> None:
    """One bias-corrected Adam update, in place.

    Frozen groups keep their values and moments untouched.  A ``"rotation"``
    group is re-normalized to unit quaternions after its update.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    state.lrs = dict(lrs)
    for name, p in params.items():
        if name in freeze:
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise AquasplatError(f"gradient shape {g.shape} does not match parameter '{name}' {p.shape}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        with np.errstate(invalid="ignore", over="ignore"):
            update = lrs[name] * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if not np.all(np.isfinite(update)):
            raise AquasplatError(f"non-finite Adam update in group '{name}'")
        p -= update
        if name == "rotation":
            p /= np.linalg.norm(p, axis=-1, keepdims=True)


def cloud_params(cloud: GaussianCloud) -> dict[str, np.ndarray]:
    """Views into the cloud's arrays keyed by parameter-group name."""
    return {name: getattr(cloud, attr) for name, attr in GROUP_FIELDS.items()}


# ---------------------------------------------------------------------------
# densification


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4
    min_opacity: float = 5e-3
    interval: int = 100
    start_iter: int = 500
    until_iter: int | None = None  # None: stop at the stage boundary
    percent_dense: float = 0.01
    max_primitives: int = 20000
    split_factor: float = 1.6


@dataclass
class GradStats:
    """View-space gradient norms accumulated between densification steps."""

    accum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradStats":
        return cls(np.zeros(n), np.zeros(n))

    def add(self, viewspace: np.ndarray, visible: np.ndarray, width: int, height: int) -> None:
        ndc = viewspace * np.array([0.5 * width, 0.5 * height])
        self.accum[visible] += np.linalg.norm(ndc[visible], axis=1)
        self.count[visible] += 1

    def mean(self) -> np.ndarray:
        return np.where(self.count > 0, self.accum / np.maximum(self.count, 1), 0.0)


@dataclass
class DensifyResult:
    cloud: GaussianCloud
    source: np.ndarray  # (N_new,) index of the originating primitive in the old cloud
    is_new: np.ndarray  # (N_new,) True for clone/split children
    n_cloned: int
    n_split: int
    n_pruned: int


def densify_and_prune(
    cloud: GaussianCloud,
    stats: GradStats,
    config: DensifyConfig,
    extent: float,
    rng: np.random.Generator,
) -> DensifyResult:
    """Clone small high-gradient Gaussians, split large ones, prune transparent ones.

    Above ``max_primitives`` only pruning happens.  Children copy every parent
    attribute, including the semantic feature; split children get positions
    sampled from the parent's Gaussian and scales divided by ``split_factor``.
    """
    n = cloud.n
    grads = stats.mean()
    prune_only = n >= config.max_primitives
    hot = (grads >= config.grad_threshold) & ~prune_only
    big = np.max(cloud.scales, axis=1) > config.percent_dense * extent
    clone = np.flatnonzero(hot & ~big)
    split = np.flatnonzero(hot & big)

    keep = np.ones(n, dtype=bool)
    keep[split] = False
    parts = [cloud.select(np.flatnonzero(keep))]
    sources = [np.flatnonzero(keep)]
    if clone.size:
        parts.append(cloud.select(clone))
        sources.append(clone)
    if split.size:
        parent = np.repeat(split, 2)
        children = cloud.select(parent)
        std = np.exp(children.log_scales)
        offsets = rng.normal(size=std.shape) * std
        rot = quat_to_rotmat(children.rotations / np.linalg.norm(children.rotations, axis=1, keepdims=True))
        children.positions += np.einsum("nij,nj->ni", rot, offsets)
        children.log_scales -= np.log(config.split_factor)
        parts.append(children)
        sources.append(parent)
    grown = GaussianCloud.concat(parts)
    source = np.concatenate(sources)
    is_new = np.zeros(grown.n, dtype=bool)
    is_new[keep.sum():] = True

    alive = grown.opacities >= config.min_opacity
    result = grown.select(np.flatnonzero(alive))
    return DensifyResult(result, source[alive], is_new[alive], int(clone.size), int(split.size), int(np.count_nonzero(~alive)))


def remap_optimizer(state: OptimizerState, result: DensifyResult, groups=tuple(GROUP_FIELDS)) -> None:
    """Carry moments over to surviving primitives; zero them for new ones."""
    for name in groups:
        for moments in (state.first_moment, state.second_moment):
            old = moments[name]
            new = old[result.source].copy()
            new[result.is_new] = 0.0
            moments[name] = new
