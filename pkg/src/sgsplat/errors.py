"""Exception types shared across the package."""


class SgsplatError(Exception):
    pass


class InvalidParameterError(SgsplatError, ValueError):
    """A parameter violates its contract (e.g. far-from-unit quaternion)."""


class InvalidSampleError(SgsplatError, ValueError):
    """A sample (pixel, depth, ...) is outside the valid domain."""


class InitializationError(SgsplatError, RuntimeError):
    """Surfel cloud initialization could not produce any primitives."""


class ConfigurationError(SgsplatError, RuntimeError):
    """Inconsistent or incomplete run configuration."""


class DatasetError(SgsplatError, RuntimeError):
    """Missing or corrupt dataset files."""


class OptimizationError(SgsplatError, RuntimeError):
    """Raised when training diverges (non-finite loss or parameters)."""
