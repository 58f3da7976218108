"""Exception types raised across the package."""


class AquasplatError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(AquasplatError, ValueError):
    """A model parameter is malformed (non-finite, wrong shape, bad SH count...)."""


class InvalidInputError(AquasplatError, ValueError):
    """An image, depth map or other array input violates its contract."""


class NonFiniteGradientError(AquasplatError, FloatingPointError):
    """Backward pass produced NaN/inf; carries the parameter group and primitive."""

    def __init__(self, group: str, index: int):
        super().__init__(f"non-finite gradient in group '{group}' at primitive {index}")
        self.group = group
        self.index = index


class ConfigError(AquasplatError, ValueError):
    pass


class SceneError(AquasplatError, ValueError):
    pass


class RegionFileError(AquasplatError, ValueError):
    pass


class CheckpointError(AquasplatError, ValueError):
    pass


class TrainingError(AquasplatError):
    """A module error raised inside the training loop, with iteration and view context."""
