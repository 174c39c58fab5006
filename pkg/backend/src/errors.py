"""
Exception hierarchy of the toolkit.

Every failure the command line has to report derives from SnojoeError, so the
entry script can catch one type, log it and exit nonzero.
"""


class SnojoeError(Exception):
    """Base class of every error raised by the toolkit."""

    exit_code = 1


class ConfigError(SnojoeError, ValueError):
    """Invalid or out-of-range parameter (also raised for CLI usage errors)."""

    exit_code = 2


class DimensionError(SnojoeError, ValueError):
    """Array shapes that do not fit together."""


class DegenerateMatrixError(SnojoeError, ArithmeticError):
    """Spectral norm too small to normalize by."""


class DataFormatError(SnojoeError, ValueError):
    """Malformed CSV input."""


class ModelFormatError(SnojoeError, ValueError):
    """Corrupt, truncated or unsupported model file."""


class TrainingDivergedError(SnojoeError, ArithmeticError):
    """Loss became NaN or infinite during training."""


class CalibrationError(SnojoeError, ValueError):
    """Threshold calibration called with unusable inputs."""


class MissingAuxiliaryError(SnojoeError, ValueError):
    """Scoring method needs fitted auxiliaries that were not supplied."""
