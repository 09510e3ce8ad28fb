"""
Error types shared across the analysis pipeline and their CLI exit codes
"""

from typing import Optional

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_DATA_ERROR = 2
EXIT_NUMERICAL_ERROR = 3


class TrendsimError(Exception):
    """Base class for every error the pipeline raises on purpose"""

    exit_code = EXIT_UNEXPECTED


class DataError(TrendsimError):
    """Input data, design or report problems"""

    exit_code = EXIT_DATA_ERROR


class ContrastError(DataError):
    pass


class SchemaError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class LayoutError(DataError):
    pass


class TransformDomainError(DataError):
    def __init__(self, message: str, row: Optional[int] = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class DegenerateDataError(DataError):
    pass


class ReportError(DataError):
    pass


class NumericalError(TrendsimError):
    """Failures inside the numerical engines"""

    exit_code = EXIT_NUMERICAL_ERROR


class NonPositiveDefiniteError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass


class BudgetExhaustedWarning(UserWarning):
    """QMC sample budget ran out before the target error was reached"""


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, TrendsimError):
        return exc.exit_code
    return EXIT_UNEXPECTED
