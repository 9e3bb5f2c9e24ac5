"""Structured logging configuration"""
import logging
import sys
from pathlib import Path
from typing import Union

from pythonjsonlogger import jsonlogger

from src.common.config import get_settings

RUN_LOG_FILENAME = "run.log"

_JSON_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"
_PLAIN_FORMAT = "%(asctime)s [%(levelname)s] %(name)s - %(message)s"


def _json_formatter() -> logging.Formatter:
    return jsonlogger.JsonFormatter(fmt=_JSON_FORMAT, datefmt="%Y-%m-%dT%H:%M:%S")


def setup_logging() -> None:
    """Configure the root logger once per process; stderr keeps stdout free for job results"""
    settings = get_settings()

    root = logging.getLogger()
    root.setLevel(getattr(logging, settings.log_level.upper()))
    root.handlers.clear()

    handler = logging.StreamHandler(sys.stderr)
    if settings.is_production or settings.log_json:
        handler.setFormatter(_json_formatter())
    else:
        handler.setFormatter(logging.Formatter(fmt=_PLAIN_FORMAT, datefmt="%Y-%m-%d %H:%M:%S"))
    root.addHandler(handler)

    logging.getLogger("torch").setLevel(logging.WARNING)


def attach_run_log(run_dir: Union[str, Path]) -> logging.FileHandler:
    """
    Append JSON log lines for one command to <run_dir>/run.log

    The caller removes the returned handler with detach_run_log when the
    command finishes. `extra=` payloads (epoch, loss, stage) become JSON keys.
    """
    path = Path(run_dir) / RUN_LOG_FILENAME
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(_json_formatter())
    logging.getLogger().addHandler(handler)
    return handler


def detach_run_log(handler: logging.FileHandler) -> None:
    logging.getLogger().removeHandler(handler)
    handler.close()


def get_logger(name: str) -> logging.Logger:
    """Get a logger instance with the given name"""
    return logging.getLogger(name)
