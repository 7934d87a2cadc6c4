from __future__ import annotations

import logging

from rich.console import Console
from rich.logging import RichHandler

PACKAGE_LOGGER = "roundcast"

# Diagnostics go to stderr; stdout carries machine-parseable command output.
stderr_console = Console(stderr=True)


def configure_logging(level: str = "INFO", quiet: bool = False) -> logging.Logger:
    """Install a single rich handler on the package logger. Safe to call repeatedly."""
    logger = logging.getLogger(PACKAGE_LOGGER)
    for existing in list(logger.handlers):
        if isinstance(existing, RichHandler):
            logger.removeHandler(existing)
    logger.addHandler(
        RichHandler(console=stderr_console, show_path=False, rich_tracebacks=False)
    )
    logger.setLevel(logging.WARNING if quiet else level.upper())
    logger.propagate = False
    return logger
