"""Exception hierarchy shared by every module."""


class SAError(Exception):
    """Base class for all package errors."""


class NotErgodic(SAError):
    pass


class SingularSystem(SAError):
    pass


class UnsupportedModel(SAError):
    pass


class InvalidGamma(SAError):
    pass


class GridTooSmall(SAError):
    pass


class NotHurwitz(SAError):
    pass


class NoConvergence(SAError):
    pass


class MissingLipschitz(SAError):
    pass


class Infeasible(SAError):
    def __init__(self, message, asymptote=None):
        super().__init__(message)
        self.asymptote = asymptote


class ConditionViolated(SAError):
    pass


class SolverStall(SAError):
    pass


class DegenerateStart(SAError):
    pass


class RegimeUnsupported(SAError):
    pass


class HorizonExceeded(SAError):
    pass


class NonFinite(SAError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class LedgerMissing(SAError):
    pass


class BadParams(SAError):
    pass


class ConfigError(SAError):
    pass
