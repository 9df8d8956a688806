"""Logging setup for the flowtap daemon and CLI.

Logs go to stderr so that stdout stays free for command output and for the
``-`` event sink. JSON records carry their own wall-clock ``ts`` and
``level``; the daemon usually runs under a plain terminal or systemd, not a
platform that stamps records for us.
"""

import json
import logging
import sys
from datetime import datetime, timezone
from typing import Any, Dict, Mapping, MutableMapping, Optional, TextIO, Tuple

TEXT_FORMAT = "%(asctime)s %(levelname)s [%(name)s] %(message)s"

# Libraries that log per job run or per request at INFO.
NOISY_LOGGERS = ("apscheduler", "urllib3")


class JSONFormatter(logging.Formatter):
    """One JSON object per record."""

    def format(self, record: logging.LogRecord) -> str:
        data: Dict[str, Any] = {
            "ts": datetime.fromtimestamp(record.created, tz=timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        # forwarder, analyzer and relay threads are named; the main thread is implied
        if record.threadName and record.threadName != "MainThread":
            data["thread"] = record.threadName
        if record.exc_info:
            data["exception"] = self.formatException(record.exc_info)
        extra = getattr(record, "extra_fields", None)
        if extra:
            data.update(extra)
        # flow keys, addresses and enums end up as their str()
        return json.dumps(data, default=str)


def configure_logging(
    level: int = logging.INFO,
    json_format: bool = True,
    debug: bool = False,
    stream: Optional[TextIO] = None,
) -> None:
    """Install a single stderr handler on the root logger.

    Args:
        level: Log level (default INFO)
        json_format: JSON records instead of text lines
        debug: Force DEBUG, including the libraries in ``NOISY_LOGGERS``
        stream: Destination (default stderr)
    """
    if debug:
        level = logging.DEBUG

    root = logging.getLogger()
    root.setLevel(level)
    for handler in root.handlers[:]:
        root.removeHandler(handler)

    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setLevel(level)
    handler.setFormatter(JSONFormatter() if json_format else logging.Formatter(TEXT_FORMAT))
    root.addHandler(handler)

    # the sink flush job runs ten times a second
    for name in NOISY_LOGGERS:
        logging.getLogger(name).setLevel(logging.DEBUG if debug else logging.WARNING)


class LoggerWithExtra(logging.LoggerAdapter):
    """Adapter taking ``extra_fields=`` per call, plus fields bound up front.

    ``bind()`` returns a child adapter, so a component can carry e.g. its
    TUN name or a flow id on every line without repeating it.
    """

    def __init__(self, logger: logging.Logger, fields: Optional[Mapping[str, Any]] = None):
        super().__init__(logger, {})
        self.fields: Dict[str, Any] = dict(fields or {})

    def bind(self, **fields: Any) -> "LoggerWithExtra":
        return LoggerWithExtra(self.logger, {**self.fields, **fields})

    def process(
        self, msg: Any, kwargs: MutableMapping[str, Any]
    ) -> Tuple[Any, MutableMapping[str, Any]]:
        merged = {**self.fields, **(kwargs.pop("extra_fields", None) or {})}
        if merged:
            kwargs.setdefault("extra", {})["extra_fields"] = merged
        return msg, kwargs


def get_logger(name: str, **fields: Any) -> LoggerWithExtra:
    """Logger named ``flowtap.<component>`` with structured-field support."""
    return LoggerWithExtra(logging.getLogger(name), fields)


__all__ = ["configure_logging", "get_logger", "JSONFormatter", "LoggerWithExtra"]
