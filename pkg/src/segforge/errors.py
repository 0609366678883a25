"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
everything else derived from SegforgeError -> 4.
"""


class SegforgeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SegforgeError):
    """Tensor or layer received incompatible shapes."""


class ContractError(SegforgeError):
    """A documented precondition was violated."""


class ConfigError(SegforgeError):
    """Invalid model or run configuration."""


class DataError(SegforgeError):
    """Dataset content is missing or inconsistent."""


class FormatError(DataError):
    """A file could not be parsed; message includes the byte offset."""


class NumericError(SegforgeError):
    """Non-finite values where finite ones are required (e.g. NaN gradients)."""
