"""Exception types shared across the package."""


class AAAEError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AAAEError, ValueError):
    pass


class InputError(AAAEError, ValueError):
    pass


class NumericalError(AAAEError, FloatingPointError):
    def __init__(self, message, batch_index=None, losses=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.losses = losses or {}


class IngestionError(AAAEError, OSError):
    pass


class CheckpointError(AAAEError):
    pass


class CohortError(AAAEError, ValueError):
    pass
