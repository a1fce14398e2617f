"""Exception hierarchy shared by the library and the command line."""


class VFFError(Exception):
    """Base class for all errors raised by vffgp."""


class DataError(VFFError, ValueError):
    """Input data is malformed, non-finite or outside the allowed domain."""


class NumericalError(VFFError, ArithmeticError):
    """A factorization failed or a quantity became non-finite."""


class ConvergenceError(VFFError):
    """An optimizer stopped before meeting its convergence criterion."""


class QuadratureError(NumericalError):
    """Adaptive quadrature did not reach the requested tolerance."""
