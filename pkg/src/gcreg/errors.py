"""Exception hierarchy shared by the library and the command line."""


class GcregError(Exception):
    """Base class for all library errors."""

    code = "E_INTERNAL"


class ValidationError(GcregError, ValueError):
    code = "E_VALIDATION"


class ParseError(ValidationError):
    """A file header or CSV row could not be parsed."""

    code = "E_PARSE"


class StructuralError(ValidationError):
    """Payload size or metadata disagree with each other."""

    code = "E_STRUCTURE"


class NumericalError(GcregError, ArithmeticError):
    """Optimisation produced a non-finite loss."""

    code = "E_NUMERIC"


class UsageError(GcregError, RuntimeError):
    code = "E_USAGE"
