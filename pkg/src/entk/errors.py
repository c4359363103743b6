"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class EntkError(Exception):
    exit_code = 1


class SpecError(EntkError):
    """Model spec is malformed or has incompatible consecutive layers."""


class DimensionError(EntkError, ValueError):
    pass


class SymmetryError(EntkError, ValueError):
    pass


class ConvergenceError(EntkError):
    exit_code = 5

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NotPositiveDefiniteError(EntkError):
    exit_code = 5

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class BudgetError(EntkError):
    exit_code = 4


class RefusalError(EntkError):
    """Refusing to clobber an existing file."""

    exit_code = 2


class IntegrityError(EntkError):
    exit_code = 3


class IncompleteTileError(EntkError):
    exit_code = 3


class NumericalCheckError(EntkError):
    exit_code = 5
