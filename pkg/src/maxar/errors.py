"""Exception types. The CLI maps each family to an exit code."""


class MaxarError(Exception):
    exit_code = 1


class ValidationError(MaxarError, ValueError):
    """Bad arguments or violated preconditions."""
    exit_code = 2


class NumericalError(MaxarError, ArithmeticError):
    """Optimizer or quadrature failure, degenerate covariance, ..."""
    exit_code = 3

    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


class DataError(MaxarError):
    """Malformed or incomplete input data."""
    exit_code = 4
