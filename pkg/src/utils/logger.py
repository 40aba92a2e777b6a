import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Union

FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
PACKAGE = __name__.split(".")[0]

# run logs currently attached; loggers created while a run is active join them
_run_handlers: List[logging.Handler] = []


def _in_package(name: str) -> bool:
    return name == PACKAGE or name.startswith(PACKAGE + ".")


def get_logger(name: str, log_file: Optional[Union[str, Path]] = None) -> logging.Logger:
    """
    Get or create a logger with consistent configuration.

    Console output always goes to stdout. A file handler is attached when
    ``log_file`` is given, or when the ``PR_LOG_DIR`` environment variable
    names a directory (the file is then ``<PR_LOG_DIR>/<name>.log``).

    Args:
        name (str): Name of the logger
        log_file (str | Path, optional): Explicit log file path

    Returns:
        logging.Logger: Configured logger instance
    """
    logger = logging.getLogger(name)

    # Only add handlers if they don't exist
    if not logger.handlers:
        logger.setLevel(os.environ.get("PR_LOG_LEVEL", "INFO").upper())
        logger.propagate = False

        formatter = logging.Formatter(FORMAT)

        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

        log_dir = os.environ.get("PR_LOG_DIR")
        if log_file is None and log_dir:
            Path(log_dir).mkdir(parents=True, exist_ok=True)
            log_file = Path(log_dir) / f"{name}.log"

        if log_file is not None:
            add_file_handler(logger, log_file)

        if _in_package(name):
            for handler in _run_handlers:
                logger.addHandler(handler)

    return logger


def add_file_handler(logger: logging.Logger, log_file: Union[str, Path]) -> logging.FileHandler:
    """Attach a file handler with the package formatter to ``logger``."""
    path = Path(log_file)
    path.parent.mkdir(parents=True, exist_ok=True)
    file_handler = logging.FileHandler(path)
    file_handler.setFormatter(logging.Formatter(FORMAT))
    logger.addHandler(file_handler)
    return file_handler


def attach_run_log(log_file: Union[str, Path]) -> logging.FileHandler:
    """
    Mirror every package logger into a single run log file.

    Package loggers created before :func:`detach_run_log` is called are
    mirrored as well.
    """
    handler = logging.FileHandler(Path(log_file))
    handler.setFormatter(logging.Formatter(FORMAT))
    for name, logger in list(logging.Logger.manager.loggerDict.items()):
        if isinstance(logger, logging.Logger) and _in_package(name) and logger.handlers:
            logger.addHandler(handler)
    _run_handlers.append(handler)
    return handler


def detach_run_log(handler: logging.FileHandler) -> None:
    if handler in _run_handlers:
        _run_handlers.remove(handler)
    for logger in list(logging.Logger.manager.loggerDict.values()):
        if isinstance(logger, logging.Logger) and handler in logger.handlers:
            logger.removeHandler(handler)
    handler.close()
