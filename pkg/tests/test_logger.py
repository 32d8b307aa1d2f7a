"""
Tests for logging helpers.
"""

import json
import logging

import pytest

from flowhmm.config import Config
from flowhmm.logger import (
    CustomFormatter,
    StructuredFormatter,
    get_logger,
    log_degenerate_update,
    log_numerical_issue,
    setup_logging,
)


@pytest.fixture
def restore_root_logger():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield root
    for handler in root.handlers:
        if handler not in handlers:
            handler.close()
    root.handlers[:] = handlers
    root.setLevel(level)


class TestFormatters:
    """Test log formatters."""

    def _make(self, message="hello", level=logging.INFO, **extra):
        record = logging.LogRecord("flowhmm.test", level, __file__, 10, message, None, None)
        for key, value in extra.items():
            setattr(record, key, value)
        return record

    def test_console_format_without_color(self):
        """Test plain console lines."""
        line = CustomFormatter(use_color=False).format(self._make())
        assert "| INFO     |" in line
        assert line.endswith("hello")
        assert "\033[" not in line

    def test_console_format_with_color(self):
        """Test colored level names."""
        line = CustomFormatter(use_color=True).format(self._make(level=logging.WARNING))
        assert "\033[33m" in line

    def test_structured_fields(self):
        """Test training context is copied into JSON lines."""
        record = self._make(class_label="yes", outer_iter=3, nll=1.5, state=2)
        data = json.loads(StructuredFormatter().format(record))

        assert data["message"] == "hello"
        assert data["level"] == "INFO"
        assert data["class_label"] == "yes"
        assert data["outer_iter"] == 3
        assert data["nll"] == 1.5
        assert data["state"] == 2
        assert "frame" not in data


class TestSetupLogging:
    """Test logging setup."""

    def test_console_handler_on_stderr(self, restore_root_logger):
        """Test a single stderr handler at the configured level."""
        setup_logging(Config(log_level="WARNING"))

        assert restore_root_logger.level == logging.WARNING
        assert len(restore_root_logger.handlers) == 1
        assert isinstance(restore_root_logger.handlers[0], logging.StreamHandler)

    def test_log_file_is_structured(self, tmp_path, restore_root_logger):
        """Test the rotating log file receives JSON lines."""
        log_file = tmp_path / "logs" / "flowhmm.log"
        setup_logging(Config(log_file=str(log_file)))

        get_logger("test").info("written", extra={"class_label": "c0"})
        for handler in restore_root_logger.handlers:
            handler.flush()

        lines = [json.loads(line) for line in log_file.read_text().splitlines()]
        assert any(line["message"] == "written" and line["class_label"] == "c0" for line in lines)

    def test_other_loggers_keep_their_levels(self, restore_root_logger):
        """Test setup only configures the root logger and leaves library loggers alone."""
        library = logging.getLogger("numba")
        previous = library.level
        library.setLevel(logging.DEBUG)
        try:
            setup_logging(Config(log_level="INFO"))
            assert library.level == logging.DEBUG
        finally:
            library.setLevel(previous)

    def test_get_logger_namespace(self):
        """Test loggers live under the package namespace."""
        assert get_logger("trainer").name == "flowhmm.trainer"


class TestDiagnostics:
    """Test diagnostic helpers."""

    def test_degenerate_update_warns(self, caplog):
        """Test zero-mass rows are reported."""
        with caplog.at_level(logging.WARNING):
            log_degenerate_update(get_logger("test"), "transition rows", [1, 2])

        assert "transition rows [1, 2]" in caplog.text
        assert caplog.records[-1].error_type == "zero_mass"

    def test_degenerate_update_silent_when_empty(self, caplog):
        """Test nothing is logged without degenerate indices."""
        with caplog.at_level(logging.WARNING):
            log_degenerate_update(get_logger("test"), "GMM components", [])

        assert caplog.records == []

    def test_numerical_issue_location(self, caplog):
        """Test the location fields given are attached."""
        with caplog.at_level(logging.ERROR):
            log_numerical_issue(get_logger("test"), "dead frame", state=1, frame=4)

        record = caplog.records[-1]
        assert record.state == 1
        assert record.frame == 4
        assert not hasattr(record, "component")
