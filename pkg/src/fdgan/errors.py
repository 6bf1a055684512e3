"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Raised when shapes, dimensions, or configuration values are inconsistent."""


class NumericsError(RuntimeError):
    """Raised when a computation hits non-finite values or fails to converge."""
