"""Exception types raised across the package."""


class RelaxConvError(Exception):
    """Base class for all package errors."""


class DomainError(RelaxConvError, ValueError):
    """A group element or parameter lies outside its valid range."""


class ShapeError(RelaxConvError, ValueError):
    """Array shapes are inconsistent with the operation."""


class ConfigError(RelaxConvError, ValueError):
    """Invalid configuration (layer setup, simulation parameters, schema)."""


class DataError(RelaxConvError, ValueError):
    """A dataset cannot support the requested operation."""


class PreconditionError(RelaxConvError, ValueError):
    """The inputs of a verification routine violate its hypotheses."""


class DivergenceError(RelaxConvError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = list(history or [])


class CheckpointMismatch(RelaxConvError, ValueError):
    """A checkpoint does not match the model specification it is loaded into."""
