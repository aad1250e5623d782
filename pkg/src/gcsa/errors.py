"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so every error a user can
trigger should derive from :class:`GCSAError`.
"""


class GCSAError(Exception):
    exit_code = 1


class ShapeError(GCSAError, ValueError):
    exit_code = 3


class DegenerateNormError(GCSAError, ArithmeticError):
    exit_code = 4


class ParameterError(GCSAError, ValueError):
    exit_code = 2


class ConfigError(GCSAError, ValueError):
    exit_code = 2


class DataError(GCSAError, ValueError):
    exit_code = 3


class NonFiniteError(GCSAError, FloatingPointError):
    exit_code = 4


class CheckpointFormatError(DataError):
    pass


class NoPositivesError(DataError):
    """Raised when a ranking instance carries no relevant item."""
