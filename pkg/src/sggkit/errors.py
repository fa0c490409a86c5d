"""Exception taxonomy shared across the package.

CLI exit codes: UsageError/ConfigError -> 1, DataError/SchemaError -> 2,
NumericalError -> 3.
"""


class ShapeError(ValueError):
    """Tensor shapes are inconsistent with the operation."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown config key."""


class UsageError(ValueError):
    """An operation was called in a way its contract forbids."""


class DataError(RuntimeError):
    """Dataset or artifact file is malformed or inconsistent."""


class SchemaError(DataError):
    """Class schema mismatch between artifacts."""


class NumericalError(RuntimeError):
    """Non-finite values or a numerical check failure."""
