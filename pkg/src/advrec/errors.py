"""Exception types shared across the package."""


class AdvrecError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AdvrecError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class DataError(AdvrecError, ValueError):
    """Malformed or inconsistent input data."""


class DimensionError(AdvrecError, ValueError):
    """Array shapes do not conform for the requested operation."""


class ContractError(AdvrecError, RuntimeError):
    """An internal precondition or API contract was violated."""


class TrainingDiverged(AdvrecError, RuntimeError):
    """Training produced a non-finite loss or gradient."""


class GradientCheckError(AdvrecError, RuntimeError):
    """Finite-difference validation could not be completed."""
