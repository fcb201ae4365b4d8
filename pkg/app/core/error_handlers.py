import functools
import traceback
from typing import Any, Callable, Dict

import pydantic

from app.core.exceptions import ErrorResponse, LabException, ValidationError
from app.core.logging import app_logger


def validation_error_from_pydantic(exc: pydantic.ValidationError, source: str = "config") -> ValidationError:
    """Convert a pydantic validation error into a ValidationError naming the field."""
    errors = exc.errors()
    first = errors[0] if errors else {"loc": (), "msg": str(exc)}
    field = ".".join(str(part) for part in first.get("loc", ())) or "<root>"
    return ValidationError(
        detail=f"Invalid {source}: field '{field}': {first.get('msg', 'invalid value')}",
        errors=[dict(err) for err in errors],
        context={"source": source, "field": field},
    )


def create_error_response(exc: BaseException) -> Dict[str, Any]:
    """Create a standardized error payload for any exception.

    Args:
        exc: The exception raised by a run

    Returns:
        JSON-ready dictionary with name, detail, exit code and context
    """
    if isinstance(exc, pydantic.ValidationError):
        exc = validation_error_from_pydantic(exc)
    if isinstance(exc, LabException):
        return exc.to_response().model_dump()
    return ErrorResponse(
        name=type(exc).__name__,
        detail=str(exc) or "An unexpected error occurred.",
        exit_code=1,
    ).model_dump()


def exit_code_for(exc: BaseException) -> int:
    """Map an exception onto the process exit status."""
    if isinstance(exc, pydantic.ValidationError):
        return ValidationError.exit_code
    if isinstance(exc, LabException):
        return exc.exit_code
    return 1


def with_error_handling(func: Callable) -> Callable:
    """Decorator to add error handling to any function.

    LabExceptions are logged and re-raised unchanged. Anything else is
    logged with its traceback and re-raised as a LabException carrying the
    function name as context.

    Args:
        func: The function to wrap with error handling

    Returns:
        Wrapped function with error handling
    """
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except LabException as exc:
            app_logger.error(f"{exc.name} in {func.__name__}: {exc.detail}")
            raise
        except pydantic.ValidationError as exc:
            converted = validation_error_from_pydantic(exc)
            app_logger.error(f"ValidationError in {func.__name__}: {converted.detail}")
            raise converted from exc
        except Exception as exc:
            app_logger.error(
                f"Unhandled exception in {func.__name__}: {str(exc)}",
                extra={"traceback": traceback.format_exc()}
            )
            raise LabException(
                detail=f"{func.__name__} failed: {exc}",
                context={"function": func.__name__, "exception": type(exc).__name__},
            ) from exc

    return wrapper
