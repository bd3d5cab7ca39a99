"""Exception types shared across the package.

Each carries the CLI exit code it maps to.
"""


class BwdqError(Exception):
    exit_code = 1


class InvalidArgument(BwdqError, ValueError):
    exit_code = 2


class InvalidState(BwdqError, RuntimeError):
    exit_code = 2


class FormatError(BwdqError, ValueError):
    exit_code = 3

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(BwdqError, ArithmeticError):
    exit_code = 4

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (at step {step})"
        super().__init__(message)
        self.step = step


class UndefinedCorrelation(BwdqError, ValueError):
    exit_code = 4
