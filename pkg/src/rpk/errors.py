"""Exception types raised across the package."""


class RpkError(Exception):
    """Base class for all errors raised by rpk."""


class ShapeError(RpkError, ValueError):
    pass


class NonFiniteError(RpkError, FloatingPointError):
    pass


class RankDeficientError(RpkError, ValueError):
    """A matrix that must be invertible from one side is not.

    The offending :class:`~rpk.tensor.RankReport` is attached as ``report``.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class InfeasibleWidthsError(RpkError, ValueError):
    pass


class ContainerError(RpkError, ValueError):
    """Malformed, truncated or corrupted ``.rpk`` file."""


class IDXError(RpkError, ValueError):
    pass


class StageOrderError(RpkError, ValueError):
    pass
