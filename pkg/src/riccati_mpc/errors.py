"""Exception types raised across the package."""


class RiccatiMpcError(Exception):
    """Base class for all package errors."""


class DimensionError(RiccatiMpcError, ValueError):
    pass


class StepTooLargeError(RiccatiMpcError):
    """A fixed-step scheme was asked to take a step it cannot take; reduce step."""


class NonFiniteError(RiccatiMpcError, FloatingPointError):
    pass


class NotHurwitzError(RiccatiMpcError):
    pass


class PreconditionError(RiccatiMpcError, ValueError):
    pass


class ConvergenceError(RiccatiMpcError):
    pass


class InstabilityError(RiccatiMpcError):
    """A simulated closed loop blew up.

    ``index`` is the offending window (or step) and ``t_stable`` the last time
    at which the state was still below the blow-up threshold.
    """

    def __init__(self, message, index=None, t_stable=None):
        super().__init__(message)
        self.index = index
        self.t_stable = t_stable
