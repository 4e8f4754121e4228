"""Exception types shared across the package.

The CLI maps these onto stable exit codes (see ``ctnet.cli``).
"""


class CtnetError(Exception):
    """Base class for all package errors."""


class ConfigError(CtnetError, ValueError):
    """Invalid configuration, hyperparameter, or shape contract."""


class DataError(CtnetError):
    """Unreadable, corrupt, or inconsistent input data."""


class StateError(CtnetError, RuntimeError):
    """Operation called in the wrong mode or without required cached state."""


class FormatError(DataError):
    """Checkpoint bytes do not follow the expected layout."""


class VersionError(FormatError):
    """Checkpoint was written by an unsupported format version."""


class TruncatedError(FormatError):
    """Checkpoint ended before all declared content was read."""


class UnknownLayerError(FormatError):
    """Checkpoint manifest names a layer kind this build does not know."""


class NonFiniteGradientError(CtnetError, FloatingPointError):
    """A gradient contained NaN or Inf; the update was not applied."""
