"""
Exception hierarchy for the SPFA toolkit
Every module raises these so the CLI can map failures to exit codes
"""

from typing import Optional


class FactorAnalysisError(Exception):
    """Base class for all toolkit errors"""

    exit_code = 1


class InputError(FactorAnalysisError, ValueError):
    """Invalid shapes, flags, CSV content or configuration keys"""


class ConfigError(InputError):
    """Configuration validation failed"""


class DegenerateInputError(InputError):
    """Input carries no usable variance (constant column, all-zero loadings)"""

    def __init__(self, message: str, column: Optional[str] = None):
        super().__init__(message)
        self.column = column


class RotationModeError(InputError):
    """Predictor family is incompatible with the rotation mode"""


class NumericalError(FactorAnalysisError):
    """A solver failed and has no partial result to return"""

    exit_code = 2

    def __init__(self, message: str, iterations: Optional[int] = None):
        super().__init__(message)
        self.iterations = iterations


class SingularityError(NumericalError):
    """Matrix is singular or too ill-conditioned for the requested operation"""

    def __init__(
        self,
        message: str,
        eigenvalue: Optional[float] = None,
        variable: Optional[str] = None,
    ):
        super().__init__(message)
        self.eigenvalue = eigenvalue
        self.variable = variable


class RankDeficiencyError(SingularityError):
    """Gauge matrix or B'SB lost rank"""


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code"""
    if isinstance(error, FactorAnalysisError):
        return error.exit_code
    return 1
