"""Exception types shared across the package."""


class QmmmAdaptError(Exception):
    """Base class for all package-specific errors."""


class InvalidSpecError(QmmmAdaptError, ValueError):
    """A lattice or model specification is malformed."""


class DimensionError(QmmmAdaptError, ValueError):
    """An array argument has the wrong shape or length."""


class GeometryError(QmmmAdaptError, ValueError):
    """A geometric requirement is violated (domain too small, missing site)."""


class ConfigurationError(QmmmAdaptError, RuntimeError):
    """An atomic configuration is inadmissible (sites too close)."""


class UnsupportedOrderError(QmmmAdaptError, ValueError):
    """A requested expansion order is not implemented."""


class NumericalError(QmmmAdaptError, RuntimeError):
    """A numerical kernel failed to converge or produced invalid output."""


class OptimizationError(QmmmAdaptError, RuntimeError):
    """Energy minimization failed; carries the last iterate for diagnosis."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class CacheError(QmmmAdaptError, RuntimeError):
    """A cache file is unreadable or fails its integrity check."""
