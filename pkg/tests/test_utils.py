import logging

import pytest

from keyreg.utils import ensure_directory, format_duration, setup_logging, stable_hash


@pytest.mark.parametrize("seconds,expected", [(12.34, "12.3s"), (150, "2m 30s"), (3725, "1h 2m")])
def test_format_duration(seconds, expected):
    assert format_duration(seconds) == expected


def test_stable_hash_ignores_key_order():
    assert stable_hash({"a": 1, "b": [1, 2]}) == stable_hash({"b": [1, 2], "a": 1})
    assert stable_hash({"a": 1}) != stable_hash({"a": 2})
    assert len(stable_hash(None)) == 16


def test_ensure_directory(tmp_path):
    target = tmp_path / "a" / "b"
    assert ensure_directory(target)
    assert target.is_dir()


def test_setup_logging_writes_file(tmp_path):
    log_file = tmp_path / "logs" / "keyreg.log"
    logger = setup_logging("debug", log_file)
    logging.getLogger("keyreg.detect").debug("calibrating")
    for handler in logger.handlers:
        handler.flush()
    assert "keyreg.detect - DEBUG - calibrating" in log_file.read_text()
    assert len(setup_logging("INFO").handlers) == 1
