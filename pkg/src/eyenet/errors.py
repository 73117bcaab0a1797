"""Exception types raised across the package."""


class EyeNetError(Exception):
    """Base class for all package errors."""


class ParseError(EyeNetError, ValueError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class UnsupportedFormat(EyeNetError, ValueError):
    pass


class TruncatedData(EyeNetError, ValueError):
    pass


class IoError(EyeNetError, OSError):
    pass


class ShapeError(EyeNetError, ValueError):
    pass


class InvalidArgument(EyeNetError, ValueError):
    pass


class NumericalError(EyeNetError, ArithmeticError):
    pass


class InvariantViolation(EyeNetError, ValueError):
    pass


class DegenerateBatch(EyeNetError, ValueError):
    pass


class MissingGradient(EyeNetError, RuntimeError):
    pass


class CorruptCheckpoint(EyeNetError, ValueError):
    pass


class CoverageError(EyeNetError, RuntimeError):
    def __init__(self, indices):
        self.indices = list(indices)
        shown = ", ".join(str(i) for i in self.indices[:20])
        more = "" if len(self.indices) <= 20 else f", ... ({len(self.indices)} total)"
        super().__init__(f"sampled points without votes: {shown}{more}")


class ConfigError(EyeNetError, ValueError):
    """A run configuration violates a validation rule.

    ``field`` names the offending config key and ``rule`` the violated constraint.
    """

    def __init__(self, field, rule):
        self.field = field
        self.rule = rule
        super().__init__(f"{field}: {rule}")
