"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad resolution, schedule, worker count, ..."""


class DimensionError(ValueError):
    """Tensor extents do not line up for the requested operation."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class UndefinedMetricError(ValueError):
    """The metric is undefined for the given inputs (e.g. a single class)."""


class NumericError(ArithmeticError):
    """Non-finite values reached an operation that requires finite input."""


class FileFormatError(OSError):
    """Malformed file header or truncated payload."""


class ImageFormatError(FileFormatError):
    """Unreadable image file or malformed image header."""
