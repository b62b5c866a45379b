"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class PfhinError(Exception):
    """Base class for all package errors."""


class ConfigError(PfhinError):
    """Bad configuration: unknown key, invalid value, preset mismatch."""


class DataError(PfhinError):
    """Bad input data: malformed file, dangling id, infeasible split."""


class NumericError(PfhinError):
    """Numeric failure: shape mismatch, non-finite values, divergence."""


class ShapeError(NumericError):
    """Tensor shape mismatch; message carries both shapes."""
