"""
Logging configuration. Logs to console, rotating file in JSON format and
logtail (only in production). When in dev environment it logs from DEBUG,
otherwise only from INFO.
"""

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from logging.config import dictConfig
from typing import Iterator

from carma_levy.config import DevConfig, ProdConfig, config


run_id: ContextVar[str] = ContextVar("run_id", default="-")


@contextmanager
def run_context(value: str) -> Iterator[None]:
    """Tags every log record emitted inside the block with the given run id,
    e.g. the seed key of a replication."""

    token = run_id.set(value)
    try:
        yield
    finally:
        run_id.reset(token)


class RunContextFilter(logging.Filter):
    """Adds the current run id to log records."""

    def __init__(self, name: str = "", default_value: str = "-") -> None:
        super().__init__(name)
        self.default_value = default_value

    def filter(self, record: logging.LogRecord) -> bool:
        """Never drops a record, only annotates it."""

        record.run_id = run_id.get() or self.default_value

        return True


# Only log to Logtail, if environment is prod
handlers = ["default", "rotating_file"]
if isinstance(config, ProdConfig):
    handlers.append("logtail")

# Set once dictConfig has run in this process; joblib workers start unset
_configured = False


def configure_logging() -> None:
    global _configured

    dictConfig(
        {
            "version": 1,
            "disable_existing_loggers": False,
            "filters": {
                "run_context": {
                    "()": RunContextFilter,
                    "default_value": "-",
                },
            },
            "formatters": {
                "console": {
                    "class": "logging.Formatter",
                    "datefmt": "%Y-%m-%dT%H:%M:%S",
                    "format": "(%(run_id)s) %(name)s:%(lineno)d - %(message)s",
                },
                "file": {
                    "class": "pythonjsonlogger.jsonlogger.JsonFormatter",
                    "datefmt": "%Y-%m-%dT%H:%M:%S",
                    # For JsonFormatter, the format string just defines what keys are included in the log record
                    "format": "%(asctime)s %(msecs)03d %(levelname)s %(run_id)s %(name)s %(lineno)d %(message)s",
                },
            },
            "handlers": {
                "default": {
                    "class": "rich.logging.RichHandler",
                    "level": "DEBUG",
                    "formatter": "console",
                    "filters": ["run_context"],
                },
                "rotating_file": {
                    "class": "logging.handlers.RotatingFileHandler",
                    "level": "DEBUG",
                    "formatter": "file",
                    "filename": config.LOG_FILE,
                    "maxBytes": 1024 * 1024,  # 1 MB
                    "backupCount": 2,
                    "encoding": "utf8",
                    "filters": ["run_context"],
                },
                "logtail": {
                    "class": "logtail.LogtailHandler",
                    "level": "DEBUG",
                    "formatter": "console",
                    "filters": ["run_context"],
                    "source_token": config.LOGTAIL_API_KEY,
                },
            },
            "loggers": {
                "carma_levy": {
                    "handlers": handlers,
                    "level": "DEBUG" if isinstance(config, DevConfig) else "INFO",
                    "propagate": False,
                },
                "joblib": {"handlers": ["default"], "level": "WARNING"},
            },
        }
    )
    _configured = True


def ensure_logging_configured() -> None:
    """Configures logging in worker processes that did not run main."""

    if not _configured:
        configure_logging()
