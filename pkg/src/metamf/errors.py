"""Exception types shared across the package.

Each class carries the CLI exit code it maps to.
"""


class MetaMFError(Exception):
    exit_code = 1


class ContractError(MetaMFError, ValueError):
    """A precondition on an argument was violated."""

    exit_code = 1


class ShapeError(ContractError):
    pass


class IngestionError(MetaMFError):
    """A rating file could not be parsed."""

    exit_code = 2

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class TrainingError(MetaMFError, ArithmeticError):
    """Training produced a non-finite loss."""

    exit_code = 3
