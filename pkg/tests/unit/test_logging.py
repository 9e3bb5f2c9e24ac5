"""Unit tests for logging setup"""
import json
import logging

import pytest
from pythonjsonlogger import jsonlogger

from src.common.config import get_settings
from src.common.logging import attach_run_log, detach_run_log, get_logger, setup_logging


@pytest.fixture
def fresh_settings(monkeypatch):
    get_settings.cache_clear()
    yield monkeypatch
    get_settings.cache_clear()
    logging.getLogger().handlers.clear()


def test_plain_formatter_in_development(fresh_settings):
    """Development runs log plain text at the configured level"""
    fresh_settings.setenv("RDEPTH_LOG_LEVEL", "DEBUG")
    setup_logging()
    root = logging.getLogger()
    assert root.level == logging.DEBUG
    assert len(root.handlers) == 1
    assert not isinstance(root.handlers[0].formatter, jsonlogger.JsonFormatter)


def test_json_formatter_when_requested(fresh_settings):
    """RDEPTH_LOG_JSON switches to JSON lines"""
    fresh_settings.setenv("RDEPTH_LOG_JSON", "true")
    setup_logging()
    assert isinstance(logging.getLogger().handlers[0].formatter, jsonlogger.JsonFormatter)


def test_json_formatter_in_production(fresh_settings):
    """Production always logs JSON"""
    fresh_settings.setenv("RDEPTH_ENVIRONMENT", "production")
    setup_logging()
    assert isinstance(logging.getLogger().handlers[0].formatter, jsonlogger.JsonFormatter)


def test_run_log_collects_json_lines(fresh_settings, tmp_path):
    """Records logged while attached land in run.log as JSON with their extra keys"""
    setup_logging()
    handler = attach_run_log(tmp_path)
    logger = get_logger("src.jobs.training")
    logger.info("Epoch done", extra={"stage": "pretrain", "epoch": 1})
    detach_run_log(handler)
    logger.info("after detach")

    lines = (tmp_path / "run.log").read_text().strip().splitlines()
    assert len(lines) == 1
    record = json.loads(lines[0])
    assert record["message"] == "Epoch done"
    assert record["stage"] == "pretrain"
    assert record["epoch"] == 1
    assert handler not in logging.getLogger().handlers
