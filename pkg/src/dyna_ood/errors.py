"""Exception types raised across the package."""


class DynaOODError(Exception):
    """Base class for all package errors."""


class DimensionError(DynaOODError, ValueError):
    pass


class EmptyBufferError(DynaOODError):
    pass


class EmptyIndexError(DynaOODError):
    pass


class ActionError(DynaOODError, ValueError):
    pass


class DegenerateSampleError(DynaOODError):
    """Every sampled pair was closer than the degeneracy cutoff."""


class NoSupportError(DynaOODError):
    """The KDE has zero kernel mass at the query point."""


class InsufficientDataError(DynaOODError):
    pass


class ScheduleError(DynaOODError, ValueError):
    pass


class NumericalError(DynaOODError, FloatingPointError):
    """A target, gradient or parameter became non-finite."""


class ConfigError(DynaOODError, ValueError):
    """Invalid experiment configuration. ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")
