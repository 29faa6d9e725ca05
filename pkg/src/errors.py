"""
Exception types for ssmkit
Every error carries a machine-readable code used by the CLI report
"""

from typing import Optional, Tuple


class SSMError(Exception):
    """Base class for all ssmkit errors"""

    code = "ssm-error"

    def __init__(self, message: str, code: Optional[str] = None):
        super().__init__(message)
        if code is not None:
            self.code = code

    def __str__(self) -> str:
        return f"[{self.code}] {super().__str__()}"


class ModelError(SSMError, ValueError):
    """Invalid model structure or inconsistent dimensions"""

    code = "model-error"


class DataError(SSMError, ValueError):
    """Observation outside the support of its distribution"""

    code = "data-error"


class SpecError(SSMError, ValueError):
    """Problem in a model specification file or its data bindings"""

    code = "spec-error"


class NumericError(SSMError, ArithmeticError):
    """
    Numerical failure inside a recursion

    Args:
        message: Description of the failure
        location: Optional (t, i) position where it happened (0-based)
    """

    code = "numeric-error"

    def __init__(self, message: str, location: Optional[Tuple[int, int]] = None):
        if location is not None:
            message = f"{message} at t={location[0]}, i={location[1]}"
        super().__init__(message)
        self.location = location


class EstimationError(SSMError, ArithmeticError):
    """Parameter values outside the admissible region"""

    code = "estimation-error"


class ApproxError(SSMError, ArithmeticError):
    """Gaussian approximation unusable for the requested computation"""

    code = "approx-error"


class DiffusePhaseError(SSMError, RuntimeError):
    """Quantity requested inside the diffuse phase where it is not defined"""

    code = "diffuse-phase-error"


class UsageError(SSMError, RuntimeError):
    """Results combined with a model they were not computed from"""

    code = "usage-error"


class UndefinedError(SSMError, RuntimeError):
    """Statistic with no defining observations"""

    code = "undefined-error"
