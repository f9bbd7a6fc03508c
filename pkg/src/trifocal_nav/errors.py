"""Exception types raised across the package."""


class NavError(Exception):
    """Base class for all package errors."""


class NonUnitQuaternion(NavError, ValueError):
    pass


class FrameMismatch(NavError, ValueError):
    pass


class NonMonotonicTime(NavError, ValueError):
    pass


class NonPsdInput(NavError, ValueError):
    pass


class IndexOutOfRange(NavError, IndexError):
    pass


class EmptyBatch(NavError, ValueError):
    pass


class SingularPz(NavError, ArithmeticError):
    pass


class NonPsdResult(NavError, ArithmeticError):
    pass


class InfeasibleSpec(NavError, ValueError):
    pass


class InsufficientOverlap(NavError, RuntimeError):
    pass


class ParseError(NavError, ValueError):
    """Config file could not be parsed. Carries the offending line when known."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class ValidationError(NavError, ValueError):
    """One or more config values are invalid; ``violations`` lists all of them."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.violations))


class SchemaError(NavError, ValueError):
    pass


class TimestampError(NavError, ValueError):
    pass
