from typing import Any, Dict, List, Optional
from pydantic import BaseModel


class ErrorDetail(BaseModel):
    """Model for detailed error information."""
    loc: List[str] = []
    msg: str
    type: str


class ErrorResponse(BaseModel):
    """Standard error payload written by the command line."""
    name: str
    detail: str
    exit_code: int
    context: Dict[str, Any] = {}
    errors: List[ErrorDetail] = []


class LabException(Exception):
    """Base exception for laboratory-specific errors.

    Carries a process exit code, a human readable detail message and a
    context dictionary with the numbers that triggered the failure.
    """
    exit_code: int = 1

    def __init__(
        self,
        detail: str = "An unexpected error occurred",
        context: Optional[Dict[str, Any]] = None,
        exit_code: Optional[int] = None,
    ):
        self.detail = detail
        self.context = context or {}
        if exit_code is not None:
            self.exit_code = exit_code
        super().__init__(detail)

    @property
    def name(self) -> str:
        return type(self).__name__

    def to_response(self) -> ErrorResponse:
        return ErrorResponse(
            name=self.name,
            detail=self.detail,
            exit_code=self.exit_code,
            context={k: _jsonable(v) for k, v in self.context.items()},
        )


class ConfigurationError(LabException):
    """Exception raised when there is a configuration error."""
    exit_code = 2

    def __init__(self, detail: str = "Configuration error", context: Optional[Dict[str, Any]] = None):
        super().__init__(detail=detail, context=context)


class ValidationError(LabException):
    """Exception raised when an input fails validation.

    `errors` lists offending fields; the first one is surfaced in `detail`.
    """
    exit_code = 2

    def __init__(
        self,
        detail: str = "Validation error",
        errors: Optional[List[Dict[str, Any]]] = None,
        context: Optional[Dict[str, Any]] = None,
    ):
        self.errors = errors or []
        super().__init__(detail=detail, context=context)

    def to_response(self) -> ErrorResponse:
        response = super().to_response()
        response.errors = [
            ErrorDetail(
                loc=[str(part) for part in err.get("loc", [])],
                msg=str(err.get("msg", "")),
                type=str(err.get("type", "value_error")),
            )
            for err in self.errors
        ]
        return response


class GridMismatchError(LabException):
    """Two fields or a field and a mask live on different grids."""
    exit_code = 3


class ConvergenceError(LabException):
    """An iterative solver did not reach its tolerance."""
    exit_code = 4


class AssumptionViolation(LabException):
    """A modelling assumption does not hold: growth of V, positivity of lap V, or a step size bound."""
    exit_code = 5


class CoincidentPointsError(LabException):
    """Two configuration points coincide; the energy is infinite."""
    exit_code = 6


class SupportViolationError(LabException):
    """A test function or transport leaves the region it must stay in."""
    exit_code = 7


class InvertibilityError(LabException):
    """A transport map could not be inverted on the grid."""
    exit_code = 8


class DegenerateDataError(LabException):
    """A statistical batch is empty or has zero variance."""
    exit_code = 9


class SamplerError(LabException):
    """Random sampling failed (eigensolver failure, corrupted chain state)."""
    exit_code = 10


def _jsonable(value: Any) -> Any:
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return str(value)
