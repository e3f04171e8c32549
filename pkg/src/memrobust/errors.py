"""Exception hierarchy.

Each class carries the CLI exit code it maps to: 2 for bad input, 3 for
domain errors, 4 for numerical failures.
"""


class MemrobustError(Exception):
    exit_code = 1


class InputError(MemrobustError, ValueError):
    """Malformed file or argument (exit code 2)."""
    exit_code = 2


class FormatError(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class EmptyInputError(InputError):
    pass


class AlignmentError(InputError):
    pass


class DomainError(MemrobustError, ValueError):
    """Well-formed input outside the operation's domain (exit code 3)."""
    exit_code = 3


class InsufficientDataError(DomainError):
    pass


class InfeasibleError(DomainError):
    pass


class ExhaustedError(DomainError):
    pass


class NotCertifiableError(DomainError):
    pass


class SizeError(DomainError):
    pass


class NumericalError(MemrobustError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericalError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
