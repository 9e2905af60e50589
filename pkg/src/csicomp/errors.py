"""Exception types shared across the package."""


class CsiError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CsiError):
    """Invalid or mutually inconsistent configuration values."""


class ParameterError(ConfigError):
    """Invalid generator or sweep parameters."""


class DimensionError(CsiError):
    """Array shapes incompatible with the requested operation."""


class StateError(CsiError):
    """Operation invoked in an invalid state, e.g. backward before forward."""


class DataError(CsiError):
    """Problems with data files or sample content."""


class DataFormatError(DataError):
    """Malformed dataset or checkpoint file."""


class DegenerateSampleError(DataError):
    """A sample whose power or scale is zero, so the operation is undefined."""


class NumericError(CsiError):
    """Non-finite values where finite ones are required (diverged training etc.)."""
