"""Exception hierarchy shared by all modules."""


class MarkHazError(Exception):
    """Base class for errors raised by this package."""


class DataError(MarkHazError, ValueError):
    """Raw or analytical data violates a structural requirement."""


class FitError(MarkHazError):
    """A model fit could not be carried out or did not succeed."""


class NoLocalData(FitError):
    """Too few events carry positive kernel weight at the requested mark."""


class BoundaryMark(FitError):
    """The mark lies outside the interior window ``[h, 1 - h]``."""


class SingularHessian(FitError):
    """The Hessian or information matrix is numerically singular."""


class NonConvergence(FitError):
    """Newton-Raphson exhausted its iteration budget.

    The last iterate is available as ``fit`` for diagnostics.
    """

    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


class LinearPredictorOverflow(FitError):
    """A linear predictor exceeded the representable range of ``exp``."""


class BandwidthError(MarkHazError):
    """No usable bandwidth candidate remains."""


class SimulationError(MarkHazError):
    """The generator could not satisfy its configuration."""
