"""Exception taxonomy shared across the package.

Each category maps to a distinct CLI exit code so shell pipelines can tell
configuration mistakes from corrupt checkpoints from numerical blow-ups.
"""


class HddmError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class DomainError(HddmError):
    """Input outside a function's mathematical domain (e.g. t not in [0, 1])."""

    exit_code = 2


class SpecError(HddmError):
    """Invalid configuration or dataset/mixture specification."""

    exit_code = 2


class ShapeError(HddmError):
    """Tensor dimensions incompatible with the model or operation."""

    exit_code = 3


class CheckpointError(HddmError):
    """Checkpoint unreadable: bad magic, version mismatch, CRC failure, or
    incompatible tensor layout. The message states which."""

    exit_code = 4


class ConversionError(HddmError):
    """Checkpoint conversion between incompatible architectures."""

    exit_code = 4


class NumericError(HddmError):
    """Non-finite value encountered where finiteness is required."""

    exit_code = 5


class SelectionError(HddmError):
    """Expert-selection strategy left no expert to fuse."""

    exit_code = 6
