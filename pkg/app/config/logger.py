"""
Logging configuration for maldnerf.
"""

import logging
import sys
from pathlib import Path

from app.config.settings import settings

class Logger:
    """Centralized logging configuration."""

    _loggers = {}
    _format = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    _datefmt = "%Y-%m-%d %H:%M:%S"

    @classmethod
    def get_logger(cls, name: str) -> logging.Logger:
        """Get or create a logger instance."""
        if name not in cls._loggers:
            logger = logging.getLogger(name)
            cls._setup_logger(logger)
            cls._loggers[name] = logger
        return cls._loggers[name]

    @classmethod
    def _log_file(cls) -> Path | None:
        """Resolve the file handler target, if any."""
        if settings.log_file is not None:
            return Path(settings.log_file)
        if settings.environment == "production":
            return Path("logs") / f"{settings.app_name}.log"
        return None

    @classmethod
    def _setup_logger(cls, logger: logging.Logger) -> None:
        """Setup logger with proper configuration."""
        logger.setLevel(getattr(logging, settings.log_level.upper()))

        # Remove existing handlers
        logger.handlers.clear()

        formatter = logging.Formatter(fmt=cls._format, datefmt=cls._datefmt)

        # Console handler
        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

        log_file = cls._log_file()
        if log_file is not None:
            log_file.parent.mkdir(parents=True, exist_ok=True)
            file_handler = logging.FileHandler(log_file)
            file_handler.setFormatter(formatter)
            logger.addHandler(file_handler)

        # Prevent propagation to root logger
        logger.propagate = False

    @classmethod
    def setup_root_logger(cls) -> None:
        """Setup root logger configuration."""
        root_logger = logging.getLogger()
        root_logger.setLevel(getattr(logging, settings.log_level.upper()))

        # Clear existing handlers
        root_logger.handlers.clear()

        formatter = logging.Formatter(fmt=cls._format, datefmt=cls._datefmt)

        # Console handler
        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setFormatter(formatter)
        root_logger.addHandler(console_handler)
