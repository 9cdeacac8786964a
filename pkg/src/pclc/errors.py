"""Error types shared across the package.

Every error raised on a documented failure path derives from PclcError so
the CLI can catch one type, print the message, and exit nonzero.
"""


class PclcError(Exception):
    """Base class for all structured errors."""


class ShapeError(PclcError):
    """Tensor shapes incompatible for an operation."""


class AutodiffError(PclcError):
    """Misuse of the tape / backward machinery."""


class OptimError(PclcError):
    """Optimizer contract violation (e.g. missing gradient)."""


class DataFormatError(PclcError):
    """Malformed corpus or embedding file; message carries the location."""


class ConfigError(PclcError):
    """Invalid or unknown configuration key/value."""


class CheckpointError(PclcError):
    """Checkpoint container damaged or incompatible with the experiment."""


class TrainingDiverged(PclcError):
    """Loss became non-finite; message names the offending term."""
