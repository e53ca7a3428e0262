"""
Exception types raised by the SympLoc library.

Configuration problems are reported with django.core.exceptions.ValidationError
(see validators.py); everything numerical or file-format related lands here.
"""


class SymplocError(Exception):
    """Base class for library errors."""


class ShapeMismatchError(SymplocError, ValueError):
    """Input shapes do not conform to a primitive's broadcasting or contraction rule."""


class DomainViolationError(SymplocError, ValueError):
    """An input lies outside a primitive's domain (atanh, log, sqrt, Mobius denominators)."""


class NonFiniteError(SymplocError, ArithmeticError):
    """A primitive produced NaN or Inf."""


class DetachedRootError(SymplocError):
    """backward() was called on a tensor that no tape recorded."""


class TrainingDivergedError(SymplocError):
    """
    Training produced a non-finite loss.

    Carries a JSON-serializable dump of the offending batch so the CLI can
    write it next to the other run artifacts.
    """

    def __init__(self, message: str, batch_dump: dict = None):
        super().__init__(message)
        self.batch_dump = batch_dump or {}


class DatasetFormatError(SymplocError, ValueError):
    """A dataset file is malformed or has an unsupported version."""


class CheckpointFormatError(SymplocError, ValueError):
    """A checkpoint file is malformed or does not match the model."""
