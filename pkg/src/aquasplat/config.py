"""Training configuration: JSON files mapped onto strict dataclasses."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .gaussian import FREEZABLE
from .losses import LossWeights
from .medium import MediumParams
from .optim import DensifyConfig, LearningRates, StageConfig


@dataclass
class SyntheticSpec:
    seed: int = 1
    n_gaussians: int = 200
    n_views: int = 8
    beta_d: list = field(default_factory=lambda: [0.2, 0.2, 0.2])
    beta_b: list = field(default_factory=lambda: [0.2, 0.2, 0.2])
    b_inf: list = field(default_factory=lambda: [0.1, 0.3, 0.4])
    width: int = 32
    height: int = 32
    n_clusters: int = 3

    def medium(self) -> MediumParams:
        return MediumParams.from_physical(self.beta_d, self.beta_b, self.b_inf)


@dataclass
class SceneSpec:
    path: str | None = None
    synthetic: SyntheticSpec | None = None

    def __post_init__(self):
        if (self.path is None) == (self.synthetic is None):
            raise ConfigError("scene: give exactly one of 'path' or 'synthetic'")


@dataclass
class StageSettings:
    stage_boundary_fraction: float = 0.6
    freeze_groups: list = field(default_factory=lambda: sorted(FREEZABLE))
    stage1_l1_weight: float = 0.8
    stage2_l1_weight: float = 0.4
    stage1_l2_weight: float = 0.0
    stage2_l2_weight: float = 0.5
    enabled: bool = True


@dataclass
class DensifySettings(DensifyConfig):
    enabled: bool = True


@dataclass
class InitSettings:
    mode: str = "points"  # "points": noisy sample of scene points; "random": uniform box
    n_points: int | None = None  # default: the synthetic scene's Gaussian count, else 1000
    position_noise: float = 0.02
    box_half_size: float = 1.5
    opacity: float = 0.1
    points_file: str | None = None  # .npy of shape (N, 6): xyz rgb

    def __post_init__(self):
        if self.mode not in ("points", "random"):
            raise ConfigError(f"init.mode must be 'points' or 'random', got {self.mode!r}")


@dataclass
class MediumInit:
    beta_d: list = field(default_factory=lambda: [0.05, 0.05, 0.05])
    beta_b: list = field(default_factory=lambda: [0.05, 0.05, 0.05])
    b_inf: list = field(default_factory=lambda: [0.5, 0.5, 0.5])  # used when b_inf_init == "fixed"
    b_inf_init: str = "image_mean"  # "image_mean" | "far_pixels" | "fixed"
    far_fraction: float = 0.05  # share of farthest prior-depth pixels used by "far_pixels"
    learn: bool = True

    def __post_init__(self):
        if self.b_inf_init not in ("image_mean", "far_pixels", "fixed"):
            raise ConfigError(f"medium_init.b_inf_init must be 'image_mean', 'far_pixels' or 'fixed', got {self.b_inf_init!r}")

    def medium(self) -> MediumParams:
        return MediumParams.from_physical(self.beta_d, self.beta_b, self.b_inf)


@dataclass
class TrainConfig:
    scene: SceneSpec
    seed: int = 0
    iterations: int = 20000
    threads: int | None = None
    termination: float = 1e-4
    log_every: int = 10
    eval_every: int = 500
    preview_every: int = 0
    checkpoint_every: int = 0
    output_dir: str = "runs/default"
    weights: LossWeights = field(default_factory=LossWeights)
    stage: StageSettings = field(default_factory=StageSettings)
    lr: LearningRates = field(default_factory=LearningRates)
    densify: DensifySettings = field(default_factory=DensifySettings)
    init: InitSettings = field(default_factory=InitSettings)
    medium_init: MediumInit = field(default_factory=MediumInit)

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be positive")
        for name in ("log_every", "eval_every", "preview_every", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def stage_config(self) -> StageConfig:
        s = self.stage
        return StageConfig(
            total_iterations=self.iterations,
            stage_boundary_fraction=s.stage_boundary_fraction,
            freeze_groups=frozenset(s.freeze_groups),
            stage1_l1_weight=s.stage1_l1_weight,
            stage2_l1_weight=s.stage2_l1_weight,
            stage1_l2_weight=s.stage1_l2_weight,
            stage2_l2_weight=s.stage2_l2_weight,
            enabled=s.enabled,
        )

    def densify_until(self) -> int:
        if self.densify.until_iter is not None:
            return self.densify.until_iter
        return self.stage_config().boundary

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


_NESTED = {
    (TrainConfig, "scene"): SceneSpec,
    (TrainConfig, "weights"): LossWeights,
    (TrainConfig, "stage"): StageSettings,
    (TrainConfig, "lr"): LearningRates,
    (TrainConfig, "densify"): DensifySettings,
    (TrainConfig, "init"): InitSettings,
    (TrainConfig, "medium_init"): MediumInit,
    (SceneSpec, "synthetic"): SyntheticSpec,
}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get((cls, key))
        kwargs[key] = _build(sub, value, f"{where}.{key}") if sub is not None and value is not None else value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: dict) -> TrainConfig:
    return _build(TrainConfig, data, "config")


def load_config(path) -> TrainConfig:
    """Parse a JSON training config; relative scene paths resolve against the file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    cfg = config_from_dict(data)
    if cfg.scene.path is not None and not Path(cfg.scene.path).is_absolute():
        cfg.scene.path = str((path.parent / cfg.scene.path).resolve())
    return cfg
