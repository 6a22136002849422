"""Exception types shared across the package."""


class DgsegError(Exception):
    """Base class for all package errors."""


class DataIntegrityError(DgsegError, ValueError):
    """Input data violates a value constraint (non-finite entries, bad label ids, missing files)."""


class ShapeError(DgsegError, ValueError):
    pass


class ParameterError(DgsegError, ValueError):
    pass


class EmptyStoreError(DgsegError, LookupError):
    pass


class ConfigError(DgsegError, ValueError):
    pass


class TrainingDivergedError(DgsegError, FloatingPointError):
    """Raised when a loss term becomes non-finite.

    ``snapshot`` carries the iteration number and the per-term values at the
    time of failure.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = dict(snapshot or {})
