"""
Exception types shared by the optimizer, the sample generator and the harness.
"""

from typing import List, Optional

from scipy.linalg import LinAlgError


class ConfigError(ValueError):
    """Raised for malformed, incomplete or unreadable experiment configs"""


class DivergenceError(ArithmeticError):
    """Raised when an optimizer step produces non-finite parameters or covariance"""


class GainComputationError(LinAlgError):
    """Raised when the innovation covariance cannot be factorized, even after jitter"""

    def __init__(self, message: str, condition_number: Optional[float] = None):
        super().__init__(message)
        self.condition_number = condition_number


class InsufficientDataError(ValueError):
    """Raised when a sample generator holds fewer usable anchors than requested"""

    def __init__(self, required: int, available: int):
        super().__init__(
            f"insufficient data: batch needs {required} usable anchors, "
            f"generator holds {available}"
        )
        self.required = required
        self.available = available


class RunAborted(RuntimeError):
    """Raised when an experiment stops early; carries the metrics recorded so far"""

    def __init__(self, message: str, rows: Optional[List] = None):
        super().__init__(message)
        self.rows = list(rows) if rows is not None else []


class SingularCovarianceError(ValueError):
    """Raised when a covariance that must be inverted is singular or indefinite"""
