"""Exception hierarchy shared by all hawkeslab modules."""


class HawkesLabError(Exception):
    """Base class for all package errors."""


class ModelValidationError(HawkesLabError, ValueError):
    """A model or one of its components violates a structural invariant."""


class UnreachableDepartureError(ModelValidationError):
    def __init__(self, coordinate):
        self.coordinate = coordinate
        super().__init__(
            f"coordinate {coordinate} cannot reach any coordinate with a positive departure rate"
        )


class NonpositiveMarkError(ModelValidationError):
    pass


class InvalidKernelError(ModelValidationError):
    pass


class DivergentIntegralError(InvalidKernelError):
    pass


class ServiceRateMismatchError(ModelValidationError):
    pass


class KernelNotMonotoneError(ModelValidationError):
    pass


class GenerationCapExceeded(HawkesLabError, RuntimeError):
    pass


class UnsortedLogError(HawkesLabError, ValueError):
    pass


class GridMismatchError(HawkesLabError, ValueError):
    pass


class NoConvergenceError(HawkesLabError, RuntimeError):
    pass


class UnstableModelError(HawkesLabError, ValueError):
    pass


class NonexponentialKernelError(HawkesLabError, ValueError):
    pass


class MissingMarkMomentError(HawkesLabError, ValueError):
    pass


class StepUnderflowError(HawkesLabError, RuntimeError):
    def __init__(self, message, suggested_step):
        self.suggested_step = suggested_step
        super().__init__(f"{message} (suggested step <= {suggested_step:.3g})")


class RepeatedEigenvaluesError(HawkesLabError, ValueError):
    pass


class RhoOutOfRangeError(HawkesLabError, ValueError):
    pass


class SubcriticalityError(HawkesLabError, ValueError):
    pass


class UnsupportedMarkKindError(HawkesLabError, ValueError):
    pass


class TruncationTooSmallError(HawkesLabError, ValueError):
    pass


class AssumptionViolatedError(HawkesLabError, ValueError):
    pass


class InsufficientSamplesError(HawkesLabError, ValueError):
    pass


class ParseError(HawkesLabError, ValueError):
    """Configuration could not be parsed; ``field`` and ``line`` locate the problem."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        loc = f" ({', '.join(where)})" if where else ""
        super().__init__(message + loc)
