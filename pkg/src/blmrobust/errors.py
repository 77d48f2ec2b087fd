"""Exception types shared across the package."""


class BlmRobustError(Exception):
    """Base class for all package errors."""


class ValidationError(BlmRobustError, ValueError):
    """Bad configuration or argument (CLI exit code 1)."""


# autodiff
class ShapeMismatch(BlmRobustError, ValueError):
    pass


class NonScalarOutput(BlmRobustError, ValueError):
    pass


class DivisionByZero(BlmRobustError, ArithmeticError):
    pass


class NonFiniteValue(BlmRobustError, ArithmeticError):
    pass


# model
class InvalidConfig(ValidationError):
    pass


class FormatError(BlmRobustError, ValueError):
    pass


# pipeline
class SigmaZero(BlmRobustError, ArithmeticError):
    """A window channel has (near) zero standard deviation."""

    def __init__(self, channel, sigma=None, window=None):
        self.channel = channel
        self.sigma = sigma
        self.window = window
        msg = f"channel {channel} has sigma {sigma!r} <= sigma_min"
        if window is not None:
            msg = f"window {window}: " + msg
        super().__init__(msg)


class WindowTooLong(ValidationError):
    pass


class TraceTooShort(ValidationError):
    pass


# threat
class BoxViolation(ValidationError):
    pass


class NoUnpaddedEntries(ValidationError):
    pass


# attack
class GradientFailure(BlmRobustError, ArithmeticError):
    pass


class NonReconstructible(BlmRobustError, ValueError):
    pass


class EmptyDataset(ValidationError):
    pass


# training / data
class DatasetClassMissing(ValidationError):
    pass


class DivergedLoss(BlmRobustError, ArithmeticError):
    pass


class InvalidGenParams(ValidationError):
    pass


class InvalidSplit(ValidationError):
    pass


# report
class ManifestMismatch(BlmRobustError, ValueError):
    pass


# cli
class IoError(BlmRobustError, OSError):
    """An output file or directory could not be written."""
