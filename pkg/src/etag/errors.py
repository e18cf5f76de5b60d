"""Exception types shared across the package."""


class EtagError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(EtagError, ValueError):
    pass


class DomainError(EtagError, ValueError):
    pass


class UsageError(EtagError, RuntimeError):
    pass


class EvaluationError(EtagError, ArithmeticError):
    """A closure or loss produced a non-finite value."""


class FormatError(EtagError, ValueError):
    """Malformed binary input. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NonFiniteLossError(EtagError, FloatingPointError):
    """Training produced a NaN/Inf loss; ``diagnostics`` says where."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
