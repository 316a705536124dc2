"""Exception hierarchy shared by every voxnet module."""


class VoxnetError(Exception):
    """Base class for all voxnet errors."""


class ShapeError(VoxnetError, ValueError):
    """Tensor extents disagree with an operation's contract.

    ``axis`` names the offending axis (or layer index) when known.
    """

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class ConfigError(VoxnetError, ValueError):
    """A hyperparameter or layer specification is invalid."""


class StateError(VoxnetError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class VersionError(VoxnetError):
    """A model file does not match the expected architecture or format version."""


class DataError(VoxnetError):
    """Malformed manifest, volume file or dataset contents."""


class TruncationError(DataError):
    """A volume file holds fewer bytes than its header declares."""


class UndefinedMetricError(VoxnetError, ValueError):
    """A metric cannot be computed for the given labels (e.g. only one class)."""


class NumericalAbort(VoxnetError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
