"""Exception hierarchy shared by the library and the CLI."""


class GraphMAError(Exception):
    """Base class for all library errors."""


class ValidationError(GraphMAError, ValueError):
    """Malformed input: bad shapes, bad files, violated preconditions."""


class ShapeError(ValidationError):
    pass


class CaptureFormatError(ValidationError):
    """A capture file could not be decoded."""


class NumericalError(GraphMAError, ArithmeticError):
    """Non-finite values or a failed iterative solver."""


class ConvergenceError(NumericalError):
    pass
