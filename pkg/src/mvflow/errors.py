"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration, shapes or dimensions.

    ``path`` names the offending config field when the error comes from
    config validation (e.g. ``"grid.points[0]"``).
    """

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class MeasureError(ValueError):
    """An empirical measure is corrupted (non-finite atoms or statistics)."""


class ProbeError(RuntimeError):
    """A numeric probe produced a non-finite value."""


class CapabilityError(ValueError):
    """The requested computation is not supported for this input."""


class NumericalFailure(RuntimeError):
    """The simulation exceeded its tolerated failure threshold."""


class OutOfDomainError(ValueError):
    """A point lies outside the spatial grid's bounding box."""
