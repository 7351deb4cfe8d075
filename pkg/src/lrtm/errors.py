"""Exception hierarchy.

Each top-level class maps to a CLI exit code: validation problems exit with 2,
numerical failures with 3, infeasible requests with 4.
"""


class LRTMError(Exception):
    exit_code = 1


class ValidationError(LRTMError, ValueError):
    exit_code = 2


class DegenerateInputError(ValidationError):
    """Input is well-formed but carries no usable variation (constant data)."""


class NumericalError(LRTMError, ArithmeticError):
    exit_code = 3


class RankDeficiencyError(NumericalError):
    def __init__(self, row, message=None):
        self.row = row
        super().__init__(message or f"masked normal matrix is singular at row {row}")


class FitFailureError(NumericalError):
    pass


class InfeasibleError(LRTMError):
    exit_code = 4


class EligibilityError(InfeasibleError):
    def __init__(self, pixel, message=None):
        self.pixel = pixel
        super().__init__(message or f"target day already missing at pixel {pixel}")


class ResourceError(LRTMError, MemoryError):
    exit_code = 3
