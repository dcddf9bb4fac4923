#!/usr/bin/env python
"""
Logging setup for the command-line tools.

Log records and status lines go to stderr with a level prefix, so that stdout carries
only the one-line JSON summary of each command.
"""

import sys
import logging
from logging import StreamHandler, Formatter

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
PREFIXES = {
    logging.DEBUG: "DEBUG",
    logging.INFO: "INFO",
    logging.WARNING: "WARNING",
    logging.ERROR: "ERROR",
    logging.CRITICAL: "CRITICAL",
}


class PmeFormatter(Formatter):
    """
    Formatter with one format string per level.
    """

    def __init__(self):
        super().__init__()

        # Форматы для разных уровней логирования
        self.formatters = {
            level: Formatter(f"{prefix}: {LOG_FORMAT}") for level, prefix in PREFIXES.items()
        }

    def format(self, record):
        formatter = self.formatters.get(record.levelno, self.formatters[logging.INFO])
        return formatter.format(record)


class PmeHandler(StreamHandler):
    """
    Stream handler writing to stderr and flushing after every record.
    """

    def __init__(self):
        super().__init__(stream=sys.stderr)
        self.setFormatter(PmeFormatter())

    def emit(self, record):
        # stderr can be swapped after setup (test runners, click's CliRunner)
        self.stream = sys.stderr
        super().emit(record)
        self.flush()


def setup_pme_logging(logger_name=None, level=logging.INFO):
    """
    Installs PmeHandler on the named logger and on the root logger.

    Existing stream handlers are replaced, so repeated calls do not duplicate output.

    Args:
        logger_name: Logger name; None configures the root logger only.
        level: Level name or number.

    Returns:
        Logger: The configured logger.
    """
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            level = logging.INFO

    logger = logging.getLogger(logger_name)
    logger.setLevel(level)

    # Удаляем существующие обработчики
    if logger_name is not None:
        for handler in logger.handlers[:]:
            logger.removeHandler(handler)
        logger.addHandler(PmeHandler())
        logger.propagate = False

    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    for handler in root_logger.handlers[:]:
        if isinstance(handler, PmeHandler) or type(handler) is StreamHandler:
            root_logger.removeHandler(handler)
    root_logger.addHandler(PmeHandler())

    return logger


def pme_print(message, level="INFO"):
    """
    Prints a status line with a level prefix to stderr.

    Args:
        message: Text to print.
        level: INFO, ERROR, WARNING, DEBUG or CRITICAL.
    """
    prefix = level.upper() if level.upper() in PREFIXES.values() else "INFO"
    print(f"{prefix}: {message}", file=sys.stderr)
    sys.stderr.flush()
