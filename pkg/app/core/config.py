from typing import Any, Dict
from pathlib import Path
from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        case_sensitive=True,
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Core Application Settings
    APP_NAME: str = "CoulombGasLab"
    APP_DESCRIPTION: str = "Numerical laboratory for two-dimensional Coulomb gases"
    APP_VERSION: str = "0.1.0"
    ENVIRONMENT: str = "development"
    DEBUG: bool = False

    # Logging Settings
    LOG_LEVEL: str = "INFO"  # DEBUG, INFO, WARNING, ERROR, CRITICAL
    LOG_TO_FILE: bool = False
    LOG_FILE: str = "logs/lab.log"
    LOG_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    # Output
    OUTPUT_DIR: Path = Path("runs")

    # Grids
    GRID_SIZE_DEFAULT: int = Field(default=256, ge=4)
    GRID_SIZE_ACCEPTANCE: int = Field(default=512, ge=4)
    BOX_HALF_WIDTH: float = Field(default=1.5, gt=0)
    EXTENSION_BOX_FACTOR: float = Field(default=40.0, ge=10.0)
    FFT_MIN_CELLS: int = 4096  # below this many cells the direct sum is used

    # Solvers
    SOR_TOL: float = Field(default=1e-10, gt=0)
    SOR_MAX_ITERS: int = Field(default=20000, ge=1)
    MASS_TOL: float = Field(default=1e-6, gt=0)
    MASK_MAX_ITERS: int = 60
    NEWTON_MAX_ITERS: int = 20
    CG_TOL: float = 1e-10

    # Sampling
    DEFAULT_BURN_IN: int = 2000
    DEFAULT_THINNING: int = 10
    RESYNC_EVERY: int = 100
    TARGET_ACCEPTANCE: float = Field(default=0.3, gt=0, lt=1)

    # Concurrency
    THREADS: int = Field(default=1, ge=1)

    @field_validator("LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        level = v.upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"Invalid log level: {v}")
        return level

    @property
    def is_production(self) -> bool:
        """Check if running in production environment."""
        return self.ENVIRONMENT.lower() == "production"

    @property
    def is_development(self) -> bool:
        """Check if running in development environment."""
        return self.ENVIRONMENT.lower() == "development"


settings = Settings()


# Helper function to get settings as a dictionary
def get_settings_dict() -> Dict[str, Any]:
    """Return settings as a dictionary for easy access."""
    return settings.model_dump(mode="json")

