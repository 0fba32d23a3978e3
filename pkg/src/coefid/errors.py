"""Exception hierarchy shared by all coefid modules."""


class CoefidError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(CoefidError, ValueError):
    """Malformed geometry, configuration or argument."""


class MeshingError(CoefidError):
    """The mesher could not reach the requested quality."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InvalidCoefficientError(InvalidInputError):
    """A PDE coefficient violates its sign constraint."""


class OutOfDomainError(InvalidInputError):
    """A point lies outside the meshed domain."""


class NumericalError(CoefidError):
    """Base class for failures of the numerical algorithms (CLI exit code 2)."""


class NoConvergenceError(NumericalError):
    """An iterative method hit its iteration cap."""

    def __init__(self, message, residual=None, history=None):
        super().__init__(message)
        self.residual = residual
        self.history = history if history is not None else []


class ContractViolationError(NumericalError):
    """A matrix failed a structural precondition (e.g. symmetry)."""


class IndefiniteSystemError(NumericalError):
    """A system that must be SPD is not."""


class DegenerateObservationError(NumericalError):
    """The observation of the sensitivity field w is (numerically) zero."""

    def __init__(self, message, step=None, value=None):
        super().__init__(message)
        self.step = step
        self.value = value


class TransformDegenerateError(NumericalError):
    """Observed data too close to zero for the exponential transform."""


class StepFailure(NumericalError):
    """Wraps a numerical failure with the index of the time step that caused it."""

    def __init__(self, step, cause):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause
