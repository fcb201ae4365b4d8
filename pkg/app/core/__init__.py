"""Core module for the laboratory.

This module contains core functionality shared by every service:
- Configuration management
- Logging
- Exception handling
- Environment report
- Reproducibility utilities

These components provide the foundation for the application and should be
imported and used by other modules as needed.
"""

# Import core modules for easy access
from app.core.config import settings
from app.core.logging import app_logger, get_logger
from app.core.exceptions import (
    LabException,
    ConfigurationError,
    ValidationError,
    GridMismatchError,
    ConvergenceError,
    AssumptionViolation,
    CoincidentPointsError,
    SupportViolationError,
    InvertibilityError,
    DegenerateDataError,
    SamplerError,
)
from app.core.error_handlers import create_error_response, exit_code_for, with_error_handling
from app.core.utils import config_hash, file_checksum, spawn_rng
from app.core.health import HealthCheck

__all__ = [
    "settings",
    "app_logger",
    "get_logger",
    "LabException",
    "ConfigurationError",
    "ValidationError",
    "GridMismatchError",
    "ConvergenceError",
    "AssumptionViolation",
    "CoincidentPointsError",
    "SupportViolationError",
    "InvertibilityError",
    "DegenerateDataError",
    "SamplerError",
    "create_error_response",
    "exit_code_for",
    "with_error_handling",
    "config_hash",
    "file_checksum",
    "spawn_rng",
    "HealthCheck",
]
