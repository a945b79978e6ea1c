"""Exception hierarchy shared across the package."""


class StochHeatError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(StochHeatError):
    """Invalid configuration value (bad extents, counts, radii, keys)."""


class GeometryError(StochHeatError):
    """Geometric precondition violated (containment, nesting, chains)."""


class DomainError(StochHeatError):
    """Argument outside its admissible domain (e.g. t outside [0, T])."""


class ResourceError(StochHeatError):
    """Requested computation exceeds a configured resource cap."""


class ShapeError(StochHeatError):
    """Array shape inconsistent with the mesh/tree it is indexed by."""


class NumericalError(StochHeatError):
    """A linear solve or iteration failed numerically."""
