"""Exception types shared across the package.

Each class maps onto one CLI exit code (see :mod:`pgpsam.cli`).
"""


class PgpSamError(Exception):
    exit_code = 1


class ConfigError(PgpSamError, ValueError):
    """Invalid hyperparameter or configuration value."""

    exit_code = 1


class DimensionError(PgpSamError, ValueError):
    """Tensor shapes do not line up."""

    exit_code = 1


class DataError(PgpSamError):
    """Missing or malformed dataset / config / checkpoint on disk."""

    exit_code = 2


class NumericError(PgpSamError, ArithmeticError):
    """NaN or inf where a finite value is required."""

    exit_code = 3
