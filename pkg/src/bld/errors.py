"""Shared exception types. The CLI maps these onto exit codes."""


class ConfigError(ValueError):
    """Invalid configuration value or config file (exit code 2)."""


class ConstraintViolationError(RuntimeError):
    """Auxiliary state survived a batch boundary (exit code 3)."""


class NumericError(RuntimeError):
    """A non-finite value appeared during training (exit code 4)."""


class ShapeError(ValueError):
    """Mismatched array or parameter-block shapes."""


class IdxFormatError(ValueError):
    """Malformed IDX dataset file."""
