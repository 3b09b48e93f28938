# Exception hierarchy shared by every module
# cli.py maps ConfigError -> exit 1, NumericalError -> exit 2,
# PreconditionError -> exit 3


class GdfError(Exception):
    pass


class ConfigError(GdfError):
    pass


class ValidationError(GdfError, ValueError):
    pass


class PreconditionError(GdfError):
    def __init__(self, message, verdicts=None):
        super().__init__(message)
        self.verdicts = verdicts or {}


class NumericalError(GdfError):
    pass


class StepSizeUnderflowError(NumericalError):
    pass


class NonFiniteStateError(NumericalError):
    pass


class ResolventDomainError(NumericalError):
    pass


class DegenerateRateError(NumericalError):
    pass


class EigensolverError(NumericalError):
    pass


class FitError(NumericalError):
    pass


class BracketError(NumericalError):
    pass


class PowerIterationError(NumericalError):
    # history = Rayleigh quotients recorded at every convergence check
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])
