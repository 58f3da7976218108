"""Underwater 3D Gaussian splatting with a learnable water medium and semantic feature alignment."""

__version__ = "0.1.0"

from .camera import Camera
from .errors import (
    AquasplatError,
    CheckpointError,
    ConfigError,
    InvalidInputError,
    InvalidParameterError,
    NonFiniteGradientError,
    RegionFileError,
    SceneError,
    TrainingError,
)
from .gaussian import GaussianCloud
from .losses import LossWeights
from .medium import MediumParams, apply_medium, restore_true_color
from .metrics import psnr, ssim
from .optim import StageConfig, stage_schedule
from .raster import rasterize, rasterize_bruteforce
from .scene import Scene, load_scene, save_scene, synth_scene
from .semantics import EmbeddingProjector, SemanticRegion, ingest_regions, semantic_loss

__all__ = [
    "AquasplatError",
    "Camera",
    "CheckpointError",
    "ConfigError",
    "EmbeddingProjector",
    "GaussianCloud",
    "InvalidInputError",
    "InvalidParameterError",
    "LossWeights",
    "MediumParams",
    "NonFiniteGradientError",
    "RegionFileError",
    "Scene",
    "SceneError",
    "SemanticRegion",
    "StageConfig",
    "TrainingError",
    "apply_medium",
    "ingest_regions",
    "load_scene",
    "psnr",
    "rasterize",
    "rasterize_bruteforce",
    "restore_true_color",
    "save_scene",
    "semantic_loss",
    "ssim",
    "stage_schedule",
    "synth_scene",
]
