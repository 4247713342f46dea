"""Exception types raised across the package."""


class MeldError(Exception):
    """Base class for all errors raised by meldctl."""


class OrderOverflow(MeldError, ValueError):
    pass


class NonFiniteEvaluation(MeldError, ArithmeticError):
    pass


class UndefinedRelativeDegree(MeldError):
    pass


class DimensionMismatch(MeldError, ValueError):
    pass


class SizeOverflow(MeldError, ValueError):
    pass


class SingularInteraction(MeldError):
    """The interaction matrix of the active meld is (numerically) singular.

    ``time`` is filled in by the simulator when the failure happens mid-run.
    """

    def __init__(self, message, cond=float("nan"), time=None):
        super().__init__(message)
        self.cond = cond
        self.time = time


class NotHurwitz(MeldError, ValueError):
    pass


class EmptyMeldSet(MeldError, ValueError):
    pass


class InversionFailure(MeldError):
    pass


class NonpositiveEpsilon(MeldError, ValueError):
    pass


class IndexOutOfRange(MeldError, IndexError):
    pass


class NonFiniteState(MeldError, ArithmeticError):
    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class FixtureMismatch(MeldError, ValueError):
    """A trace and a certificate do not describe the same scenario."""
