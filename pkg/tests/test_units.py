import pytest
from hypothesis import given, strategies as st

from jobjail.errors import UsageError
from jobjail.units import format_cpuset, parse_cpuset, parse_duration, parse_size


@pytest.mark.parametrize("text,expected", [
    ("1024", 1024),
    ("1K", 1024),
    ("5G", 5 * 2**30),
    ("512M", 512 * 2**20),
    ("2Gi", 2 * 2**30),
    ("1kb", 1024),
    ("1.5K", 1536),
    ("1T", 2**40),
])
def test_parse_size(text, expected):
    assert parse_size(text) == expected


@pytest.mark.parametrize("text", ["", "G", "5X", "-1G", "1.1", "lots"])
def test_parse_size_rejects(text):
    with pytest.raises(UsageError):
        parse_size(text)


@pytest.mark.parametrize("text,expected", [
    ("500ms", 0.5), ("2s", 2.0), ("1m", 60.0), ("3", 3.0), ("0", 0.0), ("1.5s", 1.5),
])
def test_parse_duration(text, expected):
    assert parse_duration(text) == pytest.approx(expected)


@pytest.mark.parametrize("text", ["", "1h", "abc", "-2s"])
def test_parse_duration_rejects(text):
    with pytest.raises(UsageError):
        parse_duration(text)


def test_parse_cpuset():
    assert parse_cpuset("0-3,8") == {0, 1, 2, 3, 8}
    assert parse_cpuset("5") == {5}
    assert format_cpuset({0, 1, 2, 3, 8}) == "0-3,8"


@pytest.mark.parametrize("text", ["", "3-1", "a", "1,,2", "-1"])
def test_parse_cpuset_rejects(text):
    with pytest.raises(UsageError):
        parse_cpuset(text)


@given(st.frozensets(st.integers(0, 256), min_size=1))
def test_cpuset_round_trip(cpus):
    assert parse_cpuset(format_cpuset(cpus)) == cpus
