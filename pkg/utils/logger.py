"""
Centralized logging configuration for OptiStop.
Ensures consistent formatting and levels across all modules.
"""

import logging
import os
import sys

from dotenv import load_dotenv

# Load environment variables from .env file for local runs
load_dotenv()

ROOT_LOGGER_NAME = "optistop"


def _configure_root() -> logging.Logger:
    root = logging.getLogger(ROOT_LOGGER_NAME)

    # Only configure if the logger doesn't have handlers already
    if not root.handlers:
        level_name = os.getenv("OPTISTOP_LOG_LEVEL", "INFO").upper()
        root.setLevel(getattr(logging, level_name, logging.INFO))

        # Format: [Timestamp] [Level] [Module]: Message
        formatter = logging.Formatter(
            '[%(asctime)s] [%(levelname)s] [%(name)s]: %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )

        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setFormatter(formatter)
        root.addHandler(console_handler)

        # Keep library logs out of whatever the host application configured
        root.propagate = False

    return root


def setup_logger(name: str = ROOT_LOGGER_NAME) -> logging.Logger:
    """
    Configures and returns a logger instance.
    Module loggers are children of the 'optistop' logger and share its stdout handler.
    """
    _configure_root()
    if name == ROOT_LOGGER_NAME:
        return logging.getLogger(ROOT_LOGGER_NAME)
    return logging.getLogger(f"{ROOT_LOGGER_NAME}.{name}")


def set_quiet(quiet: bool = True) -> None:
    """Raises the shared level to WARNING (used by the --quiet flag)."""
    _configure_root().setLevel(logging.WARNING if quiet else logging.INFO)


# Create a default logger instance for general use
logger = setup_logger()
