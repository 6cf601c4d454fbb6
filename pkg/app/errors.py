from typing import Optional


class LocalInrError(Exception):
    """Base class for every failure raised by the package."""

    error_type = "localinr_error"


class ConfigError(LocalInrError):
    error_type = "invalid_config"

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class GridDivisibilityError(ConfigError):
    error_type = "grid_not_divisible"


class ShapeError(LocalInrError, ValueError):
    """A primitive, layer or data contract received incompatible shapes."""

    error_type = "shape_mismatch"

    def __init__(self, node: str, message: str):
        self.node = node
        super().__init__(f"[{node}] {message}")


class LayoutError(ShapeError):
    error_type = "weight_layout_mismatch"


class PrecisionError(LocalInrError):
    error_type = "precision"


class NonFiniteGradientError(LocalInrError, FloatingPointError):
    error_type = "non_finite_gradient"

    def __init__(self, parameter: str):
        self.parameter = parameter
        super().__init__(f"non-finite gradient for parameter '{parameter}'")


class TrainingDivergedError(LocalInrError, FloatingPointError):
    error_type = "training_diverged"

    def __init__(self, epoch: int, batch: int, loss_name: str, value: float):
        self.epoch = epoch
        self.batch = batch
        super().__init__(
            f"non-finite {loss_name}={value} at epoch {epoch}, batch {batch}"
        )


class DatasetError(LocalInrError):
    error_type = "dataset"

    def __init__(self, sample_id: Optional[str], message: str):
        self.sample_id = sample_id
        prefix = f"sample '{sample_id}': " if sample_id else ""
        super().__init__(prefix + message)


class CropError(LocalInrError, ValueError):
    error_type = "crop"


class CheckpointError(LocalInrError):
    error_type = "checkpoint"


class ChannelMismatchError(LocalInrError, ValueError):
    error_type = "channel_mismatch"


class DegenerateComparisonError(LocalInrError, ValueError):
    error_type = "degenerate_comparison"
