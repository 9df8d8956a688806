"""Tests for structured logging configuration."""

import json
import logging
from io import StringIO

from src.logging_config import JSONFormatter, configure_logging, get_logger


def test_json_formatter():
    """Test JSONFormatter produces valid JSON output."""
    logger = logging.getLogger("flowtap.test")
    handler = logging.StreamHandler(StringIO())

    formatter = JSONFormatter()
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)

    try:
        logger.info("Test message")
    finally:
        logger.removeHandler(handler)

    output = handler.stream.getvalue()
    data = json.loads(output.strip())

    assert data["message"] == "Test message"
    assert data["logger"] == "flowtap.test"
    assert data["level"] == "INFO"
    assert data["ts"].endswith("+00:00")
    assert "thread" not in data


def test_extra_fields_and_exception():
    """Extra fields are merged and exceptions are formatted."""
    stream = StringIO()
    log = get_logger("flowtap.test_extra")
    handler = logging.StreamHandler(stream)
    handler.setFormatter(JSONFormatter())
    log.logger.addHandler(handler)
    log.logger.setLevel(logging.INFO)

    try:
        log.info("Gateway running", extra_fields={"tun": "flowtap0", "analyzer": True})
        try:
            raise ValueError("bad packet")
        except ValueError:
            log.exception("Handler failed")
    finally:
        log.logger.removeHandler(handler)

    first, second = [json.loads(line) for line in stream.getvalue().splitlines()]
    assert first["tun"] == "flowtap0"
    assert first["analyzer"] is True
    assert "ValueError: bad packet" in second["exception"]


def test_thread_name_recorded():
    record = logging.LogRecord("flowtap.forwarder", logging.INFO, __file__, 1, "tick", (), None)
    record.threadName = "forwarder"
    assert json.loads(JSONFormatter().format(record))["thread"] == "forwarder"


def test_configure_logging_json():
    """Test configure_logging with JSON format."""
    stream = StringIO()
    configure_logging(level=logging.INFO, json_format=True, stream=stream)

    logging.getLogger("flowtap.test_json").info("Test structured logging")
    logging.getLogger("flowtap.test_json").debug("hidden")

    lines = stream.getvalue().splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])["message"] == "Test structured logging"


def test_configure_logging_text():
    """Test configure_logging with text format."""
    stream = StringIO()
    configure_logging(json_format=False, debug=True, stream=stream)

    logging.getLogger("flowtap.test_text").debug("plain line")
    assert "DEBUG [flowtap.test_text] plain line" in stream.getvalue()
    assert logging.getLogger().level == logging.DEBUG


def test_configure_logging_replaces_handlers():
    configure_logging(stream=StringIO())
    configure_logging(stream=StringIO())
    assert len(logging.getLogger().handlers) == 1


def test_bound_fields_merge_with_call_fields():
    stream = StringIO()
    log = get_logger("flowtap.test_bind", tun="flowtap0").bind(flow_id=7)
    handler = logging.StreamHandler(stream)
    handler.setFormatter(JSONFormatter())
    log.logger.addHandler(handler)
    log.logger.setLevel(logging.INFO)

    try:
        log.info("flow reset", extra_fields={"flow_id": 8, "reason": "rst"})
        log.info("plain")
    finally:
        log.logger.removeHandler(handler)

    first, second = [json.loads(line) for line in stream.getvalue().splitlines()]
    assert (first["tun"], first["flow_id"], first["reason"]) == ("flowtap0", 8, "rst")
    assert (second["tun"], second["flow_id"]) == ("flowtap0", 7)


def test_scheduler_logs_quiet_unless_debug():
    configure_logging(stream=StringIO())
    assert logging.getLogger("apscheduler").level == logging.WARNING
    configure_logging(debug=True, stream=StringIO())
    assert logging.getLogger("apscheduler").level == logging.DEBUG
