"""
Environment report for CoulombGasLab runs.
Records machine, platform and numerical-stack versions into every run manifest.
"""

import importlib
import platform
import time
from typing import Any, Dict

import psutil

from app.core.config import settings
from app.core.logging import get_logger

logger = get_logger("health")


class HealthCheck:
    """Environment and resource checks."""

    REQUIRED_PACKAGES = [
        "numpy",
        "scipy",
        "pandas",
        "pydantic",
        "pydantic_settings",
        "dotenv",
        "psutil",
    ]

    @staticmethod
    def check_system_resources() -> Dict[str, Any]:
        """Check memory and CPU availability."""
        try:
            memory = psutil.virtual_memory()
            memory_available_gb = memory.available / (1024**3)
            return {
                "cpu_count_logical": psutil.cpu_count(logical=True),
                "cpu_count_physical": psutil.cpu_count(logical=False),
                "memory_usage_percent": memory.percent,
                "memory_available_gb": round(memory_available_gb, 2),
                # a 512x512 kernel convolution needs well under 1 GB
                "status": "healthy" if memory_available_gb > 1.0 else "warning",
            }
        except Exception as e:
            logger.error(f"Error checking system resources: {e}")
            return {"status": "error", "error": str(e)}

    @staticmethod
    def check_application_config() -> Dict[str, Any]:
        """Report the settings that influence numerical results."""
        config_status = {
            "app_name": settings.APP_NAME,
            "app_version": settings.APP_VERSION,
            "environment": settings.ENVIRONMENT,
            "sor_tol": settings.SOR_TOL,
            "mass_tol": settings.MASS_TOL,
            "threads": settings.THREADS,
            "status": "healthy",
        }
        if settings.THREADS > (psutil.cpu_count(logical=True) or 1):
            config_status["status"] = "warning"
            config_status["warning"] = "More worker threads than logical CPUs"
        return config_status

    @staticmethod
    def check_dependencies() -> Dict[str, Any]:
        """Check that the numerical stack imports and record versions."""
        dependency_status = {
            "versions": {},
            "missing_packages": [],
            "status": "healthy",
        }

        for package in HealthCheck.REQUIRED_PACKAGES:
            try:
                module = importlib.import_module(package)
                dependency_status["versions"][package] = getattr(module, "__version__", "unknown")
            except ImportError:
                dependency_status["missing_packages"].append(package)

        if dependency_status["missing_packages"]:
            dependency_status["status"] = "error"
            dependency_status["error"] = f"Missing packages: {', '.join(dependency_status['missing_packages'])}"

        return dependency_status

    @staticmethod
    def check_platform_info() -> Dict[str, Any]:
        """Get platform and Python version information."""
        try:
            return {
                "platform": platform.platform(),
                "python_version": platform.python_version(),
                "architecture": platform.architecture()[0],
                "processor": platform.processor() or "Unknown",
                "status": "healthy",
            }
        except Exception as e:
            logger.error(f"Error getting platform info: {e}")
            return {"status": "error", "error": str(e)}

    @staticmethod
    def check_all() -> Dict[str, Any]:
        """Perform the full environment check."""
        report = {
            "timestamp": time.time(),
            "status": "healthy",
            "checks": {
                "system_resources": HealthCheck.check_system_resources(),
                "application_config": HealthCheck.check_application_config(),
                "dependencies": HealthCheck.check_dependencies(),
                "platform_info": HealthCheck.check_platform_info(),
            },
        }

        check_statuses = [check["status"] for check in report["checks"].values()]
        if "error" in check_statuses:
            report["status"] = "error"
        elif "warning" in check_statuses:
            report["status"] = "warning"

        logger.debug(f"Environment check completed with status: {report['status']}")
        return report

    @staticmethod
    def environment_fingerprint() -> Dict[str, Any]:
        """Stable subset of the report (no timestamps, no load figures)."""
        deps = HealthCheck.check_dependencies()
        info = HealthCheck.check_platform_info()
        return {
            "python_version": info.get("python_version"),
            "platform": info.get("platform"),
            "versions": deps["versions"],
        }


if __name__ == "__main__":
    import json
    print(json.dumps(HealthCheck.check_all(), indent=2))
