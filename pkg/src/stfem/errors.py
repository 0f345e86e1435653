"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Bad input to an operation (wrong shape, out-of-range value, ...)."""


class InvalidState(RuntimeError):
    """Operation requested on an object that is no longer valid."""


class ConsistencyError(RuntimeError):
    """An internal invariant was found violated."""


class CapacityError(RuntimeError):
    """A dense oracle was asked for a problem above its size cap."""


class NumericalBreakdown(RuntimeError):
    """An iterative method met a non-positive curvature direction."""


class InvalidData(ValueError):
    """Tabular data that cannot be processed (e.g. non-positive values on a log scale)."""
