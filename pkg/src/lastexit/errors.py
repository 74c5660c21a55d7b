"""Exception types shared across the package."""


class LastExitError(Exception):
    """Base class for all package errors."""


class InvalidGridError(LastExitError, ValueError):
    pass


class UnsupportedGridError(LastExitError, ValueError):
    pass


class InvalidDimensionError(LastExitError, ValueError):
    pass


class NotPSDError(LastExitError, ValueError):
    """Covariance factorization hit a negative pivot beyond tolerance."""

    def __init__(self, message, pivot):
        super().__init__(message)
        self.pivot = pivot


class InvalidSamplerError(LastExitError, ValueError):
    pass


class UndefinedEstimateError(LastExitError, RuntimeError):
    pass


class QuadratureError(LastExitError, RuntimeError):
    def __init__(self, message, achieved):
        super().__init__(message)
        self.achieved = achieved


class ConfigError(LastExitError, ValueError):
    pass


class ReplicationError(LastExitError, RuntimeError):
    def __init__(self, message, index):
        super().__init__(message)
        self.index = index
