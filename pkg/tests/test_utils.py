import logging

import pytest

from errors import ConfigurationError
from utils import (
    _get_float_env,
    _get_int_env,
    coerce_positive_int,
    format_levels,
    parse_levels,
)


class TestGetNumericEnv:
    def test_int_default_when_not_set(self, monkeypatch):
        monkeypatch.delenv("TEST_INT", raising=False)
        assert _get_int_env("TEST_INT", 7) == 7

    def test_int_empty_string_uses_default(self, monkeypatch):
        monkeypatch.setenv("TEST_INT", "")
        assert _get_int_env("TEST_INT", 7) == 7

    def test_parses_int(self, monkeypatch):
        monkeypatch.setenv("TEST_INT", "42")
        assert _get_int_env("TEST_INT", 0) == 42

    def test_parses_float(self, monkeypatch):
        monkeypatch.setenv("TEST_FLOAT", "3.14")
        assert _get_float_env("TEST_FLOAT", 0.0) == pytest.approx(3.14)

    def test_raises_on_invalid_string(self, monkeypatch):
        monkeypatch.setenv("TEST_FLOAT", "not-a-number")
        with pytest.raises(ValueError):
            _get_float_env("TEST_FLOAT", 0.0)


class TestParseLevels:
    @pytest.mark.parametrize(
        "value,expected",
        [
            ("1,2,3,4", (1, 2, 3, 4)),
            ("4,1", (1, 4)),
            ("L=1,4", (1, 4)),
            (" 3 ", (3,)),
            ([2, 2, 1], (1, 2)),
        ],
    )
    def test_valid(self, value, expected):
        assert parse_levels(value) == expected

    @pytest.mark.parametrize("value", ["", "5", "0,1", "a,b", [], "L="])
    def test_invalid(self, value):
        with pytest.raises(ConfigurationError):
            parse_levels(value)


class TestFormatLevels:
    def test_scheme_label(self):
        assert format_levels((1, 4)) == "L=1,4"
        assert format_levels([4, 3, 2, 1]) == "L=1,2,3,4"

    def test_round_trip_with_parse(self):
        assert parse_levels(format_levels((2, 3))) == (2, 3)


class TestCoercePositiveInt:
    def test_none_returns_default(self):
        assert coerce_positive_int(None, 3) == 3
        assert coerce_positive_int("", 3) == 3

    def test_valid_string(self):
        assert coerce_positive_int("4", 1) == 4

    def test_invalid_string_returns_default_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            result = coerce_positive_int("many", 1, "workers")

        assert result == 1
        assert any("Invalid workers" in r.message for r in caplog.records)

    def test_non_positive_returns_default_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            result = coerce_positive_int(0, 2, "workers")

        assert result == 2
        assert any("Non-positive" in r.message for r in caplog.records)
