"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, DivergenceError -> 4.
"""


class OdenetError(Exception):
    """Base class for package errors."""


class ShapeError(OdenetError):
    """An operation was fed tensors with incompatible shapes."""


class ConfigError(OdenetError):
    """Invalid configuration file, override, or CLI argument combination."""


class DataError(OdenetError):
    """Missing or corrupt dataset files."""


class DivergenceError(OdenetError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
