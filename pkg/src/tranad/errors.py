"""Exception types shared across the package."""


class TranadError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(TranadError):
    def __init__(self, message, row=None, col=None):
        super().__init__(message)
        self.row = row
        self.col = col


class ShapeMismatch(TranadError):
    pass


class DimensionMismatch(TranadError):
    pass


class NonFiniteInput(TranadError):
    pass


class EmptySeries(TranadError):
    pass


class OverlapError(TranadError):
    pass


class OddWidth(TranadError):
    pass


class MissingGradient(TranadError):
    pass


class NonFiniteLoss(TranadError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class EmptyInput(TranadError):
    pass


class TooFewExcesses(TranadError):
    pass


class DegenerateTruth(TranadError):
    pass


class LengthMismatch(TranadError):
    pass


class NoAnomalousTimestamps(TranadError):
    pass


class ConfigMismatch(TranadError):
    pass
