"""Exception hierarchy shared by all solver modules."""


class BiparallelError(Exception):
    """Base class for every error raised by the package."""


class SingularForm(BiparallelError):
    """A fundamental form is not invertible at the evaluation point."""


class DegenerateUpdate(BiparallelError):
    """Surface update determinant is within the floor of zero."""


class StepTooLarge(BiparallelError):
    """Finite-difference extrapolation diagnostic exceeds its tolerance."""


class DegenerateDomain(BiparallelError):
    """Boundary arcs cross or leave the admissible radial band."""


class SingularElement(BiparallelError):
    """An element has zero or negative Jacobian."""


class AssemblyFailure(BiparallelError):
    """A coefficient evaluated to a non-finite value during assembly."""


class LinearSolveFailure(BiparallelError):
    """The sparse direct solver failed or returned non-finite values."""


class NonConvergence(BiparallelError):
    """An iteration exhausted its budget.

    The last iterate and a diagnostic trail are attached so callers can
    inspect partial results instead of discarding them.
    """

    def __init__(self, message, state=None, history=None):
        super().__init__(message)
        self.state = state
        self.history = history or []


class InsufficientLayers(BiparallelError):
    """Not enough interior layers next to a blade for one-sided quotients."""


class BadPartition(BiparallelError):
    """The requested transverse partition is invalid."""


class SingularLinearization(BiparallelError):
    """The frozen linearized operator has an inf-sup estimate below floor."""


class ParseError(BiparallelError):
    """Configuration text is syntactically invalid."""

    def __init__(self, message, line=None, column=None):
        loc = "" if line is None else f" (line {line}, column {column})"
        super().__init__(message + loc)
        self.line = line
        self.column = column


class ValidationError(BiparallelError):
    """A configuration value is missing, unknown or out of range."""

    def __init__(self, field, message, suggestion=None):
        text = f"{field}: {message}"
        if suggestion:
            text += f" (did you mean '{suggestion}'?)"
        super().__init__(text)
        self.field = field
        self.suggestion = suggestion
