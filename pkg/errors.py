"""
Exception hierarchy for the weed classification pipeline.

Every error raised on purpose by the package derives from WeedPilotError so the
CLI can turn it into a structured message and exit code 1.
"""

from typing import Optional


class WeedPilotError(Exception):
    """Base class for all pipeline errors."""


# ============================================================================
# DATA
# ============================================================================

class TaxonomyError(WeedPilotError):
    """Class list or class directory layout does not match the taxonomy."""

    def __init__(self, message: str, class_name: Optional[str] = None):
        super().__init__(message)
        self.class_name = class_name


class InsufficientDataError(WeedPilotError):
    """A class has too few samples for the requested split."""

    def __init__(self, class_name: str, available: int, required: int):
        super().__init__(
            f"class '{class_name}' has {available} samples, at least {required} required"
        )
        self.class_name = class_name
        self.available = available
        self.required = required


class DataLeakError(WeedPilotError):
    """A test-role sample was requested by a training or validation loader."""


class ImageArgumentError(WeedPilotError, ValueError):
    """Invalid raster argument (empty image, zero target size, degenerate quad)."""


# ============================================================================
# NETWORK
# ============================================================================

class GraphError(WeedPilotError):
    """Model graph construction or shape inference failed."""

    def __init__(self, message: str, layer: Optional[str] = None):
        super().__init__(f"{layer}: {message}" if layer else message)
        self.layer = layer


class ShapeError(GraphError):
    """A tensor does not fit the layer it is fed to."""


class NonFiniteError(WeedPilotError):
    """NaN or Inf detected at a layer boundary or in a gradient (checked mode)."""

    def __init__(self, where: str):
        super().__init__(f"non-finite values detected in {where}")
        self.where = where


class UnfoldableError(GraphError):
    """Batch-norm layer is not directly preceded by a linear layer."""


# ============================================================================
# DEPLOY / TRAIN / EVAL
# ============================================================================

class CheckpointFormatError(WeedPilotError):
    """Checkpoint file is not a readable WPCK file of a supported version."""

    def __init__(self, message: str, offset: Optional[int] = None):
        super().__init__(f"{message} (offset {offset})" if offset is not None else message)
        self.offset = offset


class CheckpointShapeError(WeedPilotError):
    """Tensor stored in a checkpoint disagrees with the graph it belongs to."""

    def __init__(self, tensor: str, expected: tuple, found: tuple):
        super().__init__(f"tensor '{tensor}' has shape {found}, graph expects {expected}")
        self.tensor = tensor
        self.expected = expected
        self.found = found


class TrainingDiverged(WeedPilotError):
    """Training loss became non-finite; carries the partial per-epoch log."""

    def __init__(self, epoch: int, log: list):
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch
        self.log = log


class BenchmarkError(WeedPilotError):
    """Benchmark preconditions not met (warmup, too few timed frames)."""


class FieldError(WeedPilotError):
    """Field scenario or robot state is invalid for simulation."""


class ConfigError(WeedPilotError):
    """Run configuration could not be resolved."""
