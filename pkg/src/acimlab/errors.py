"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes, so the split between "the input is
malformed" and "the numerics went wrong" matters.
"""


class AcimError(Exception):
    """Base class for every error raised by acimlab."""


class StructuralError(AcimError, ValueError):
    """Malformed object: bad partition, dimension or kind mismatch."""


class ParameterError(AcimError, ValueError):
    """A parameter lies outside its admissible range."""


class NumericalError(AcimError, ArithmeticError):
    """A numerical routine failed (root finder, quadrature, eigensolver)."""


class ConvergenceError(NumericalError):
    """An iterative solver hit its iteration cap.

    Attributes
    ----------
    residual : float
        Last L1 residual seen before giving up.
    """

    def __init__(self, message, residual=float("nan"), delta=None):
        super().__init__(message)
        self.residual = residual
        self.delta = delta


class SamplingError(AcimError):
    """A random test-function sample is unusable (e.g. all seminorms zero)."""


class ValidationFailed(AcimError):
    """A map failed validation (non-expanding, non-monotone, bad images)."""
