"""
Application settings and configuration management.
"""

from pathlib import Path
from typing import Optional
from pydantic import AliasChoices, Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

class Settings(BaseSettings):
    """Process-wide settings loaded from environment variables and `.env`."""

    # Application Settings
    app_name: str = Field("maldnerf", validation_alias=AliasChoices("MALDNERF_APP_NAME", "APP_NAME"))
    environment: str = Field("development", validation_alias=AliasChoices("MALDNERF_ENVIRONMENT", "ENVIRONMENT"))
    log_level: str = Field("INFO", validation_alias=AliasChoices("MALDNERF_LOG_LEVEL", "LOG_LEVEL"))
    log_file: Optional[Path] = Field(None, validation_alias=AliasChoices("MALDNERF_LOG_FILE", "LOG_FILE"))

    # Artifact cache
    cache_dir: Path = Field(
        Path.home() / ".cache" / "maldnerf",
        validation_alias=AliasChoices("MALDNERF_CACHE", "CACHE_DIR"),
    )

    # Compute
    num_threads: Optional[int] = Field(None, validation_alias=AliasChoices("MALDNERF_NUM_THREADS", "NUM_THREADS"))

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v):
        """Validate the log level name."""
        level = v.upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"Unknown log level '{v}'")
        return level

    @field_validator("num_threads")
    @classmethod
    def validate_num_threads(cls, v):
        """Thread caps must be positive."""
        if v is not None and v < 1:
            raise ValueError("num_threads must be >= 1")
        return v

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
        case_sensitive=False,
        populate_by_name=True,
    )

# Global settings instance
settings = Settings()
