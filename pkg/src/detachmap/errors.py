"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, NumericalError -> 3,
DataError -> 4. Everything else is a plain bug and propagates.
"""


class DetachmapError(Exception):
    """Base class for all package errors."""


class ConfigError(DetachmapError):
    """Invalid or inconsistent run configuration."""


class DataError(DetachmapError):
    """Malformed or incompatible input data."""


class GridFormatError(DataError):
    """Malformed ASCII grid file; message carries the offending line number."""


class NumericalError(DetachmapError):
    """A numerical procedure failed (rank deficiency, divergence, overflow)."""
