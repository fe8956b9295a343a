import logging
import os
import sys
from pathlib import Path
from datetime import datetime
from typing import Optional

from dotenv import load_dotenv

# * Pick up DIGEST_LOG_* from a local .env before the first logger is built
load_dotenv()

_TRUTHY = {"1", "true", "yes", "on"}


def _env_level() -> int:
    name = os.getenv("DIGEST_LOG_LEVEL", "INFO").upper()
    return getattr(logging, name, logging.INFO)


def setup_logger(
    name: str = __name__,
    level: Optional[int] = None,
    log_to_file: Optional[bool] = None,
    log_to_console: bool = True,
    log_dir: Optional[str] = None,
) -> logging.Logger:
    """
    Set up a logger with console and optional file handlers.

    Unset arguments fall back to the DIGEST_LOG_LEVEL, DIGEST_LOG_TO_FILE and
    DIGEST_LOG_DIR environment variables.

    Args:
        name: Logger name (usually the concern, e.g. "training")
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_to_file: Whether to log to a daily file
        log_to_console: Whether to log to stdout
        log_dir: Directory to store log files

    Returns:
        Configured logger instance
    """
    # * Create logger
    logger = logging.getLogger(name)

    # * Prevent duplicate handlers if logger already exists
    if logger.handlers:
        return logger

    if level is None:
        level = _env_level()
    if log_to_file is None:
        log_to_file = os.getenv("DIGEST_LOG_TO_FILE", "").lower() in _TRUTHY
    if log_dir is None:
        log_dir = os.getenv("DIGEST_LOG_DIR", "logs")

    logger.setLevel(level)
    logger.propagate = False

    # * Create formatter
    formatter = logging.Formatter(
        fmt="%(asctime)s | %(levelname)-2s | %(name)s | %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    # * Console handler
    if log_to_console:
        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setLevel(level)
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

    # * File handler
    if log_to_file:
        log_path = Path(log_dir)
        log_path.mkdir(parents=True, exist_ok=True)

        # * One file per logger per day
        timestamp = datetime.now().strftime("%Y%m%d")
        log_file = log_path / f"{name.replace('.', '_')}_{timestamp}.log"

        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger


# * Pre-configured loggers for each concern
def get_data_logger() -> logging.Logger:
    """Get logger for dataset generation, I/O and preprocessing."""
    return setup_logger("data")


def get_masking_logger() -> logging.Logger:
    """Get logger for modality masking."""
    return setup_logger("masking")


def get_network_logger() -> logging.Logger:
    """Get logger for network construction and checkpoints."""
    return setup_logger("network")


def get_training_logger() -> logging.Logger:
    """Get logger for the teacher and student training loops."""
    return setup_logger("training")


def get_evaluation_logger() -> logging.Logger:
    """Get logger for Dice evaluation and reports."""
    return setup_logger("evaluation")


def get_cli_logger() -> logging.Logger:
    """Get logger for the command line entry point."""
    return setup_logger("cli")


# * Utility functions for common logging patterns
def log_function_entry(logger: logging.Logger, func_name: str, **kwargs):
    """Log function entry with parameters."""
    params = ", ".join(f"{k}={v}" for k, v in kwargs.items())
    logger.debug(f"Entering {func_name}({params})")


def log_error(logger: logging.Logger, error: Exception, context: str = ""):
    """Log error with context information."""
    if context:
        logger.error(f"{context}: {str(error)}", exc_info=error)
    else:
        logger.error(f"Error: {str(error)}", exc_info=error)


def log_success(logger: logging.Logger, message: str):
    """Log success message."""
    logger.info(message)


def log_warning(logger: logging.Logger, message: str):
    """Log warning message."""
    logger.warning(message)


def log_debug(logger: logging.Logger, message: str):
    """Log debug message."""
    logger.debug(message)


def log_info(logger: logging.Logger, message: str):
    """Log info message."""
    logger.info(message)


def configure_third_party_loggers():
    """Configure third-party library loggers to reduce noise."""
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)
    logging.getLogger("nibabel").setLevel(logging.WARNING)


# * Initialize third-party logger configuration
configure_third_party_loggers()
