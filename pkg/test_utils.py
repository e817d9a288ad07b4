import os
import csv

import pytest

from utils import FormatError, atomic_write_csv, atomic_write_text, default_file_mode, format_sig

# --- Test Fixtures ---

@pytest.fixture
def restrictive_umask():
    previous = os.umask(0o027)
    yield 0o027
    os.umask(previous)


# --- Formatting ---

def test_format_sig():
    assert format_sig(1.23456789) == "1.23457"
    assert format_sig(7) == "7"
    assert format_sig(None) == ""


# --- Atomic writers ---

def test_default_file_mode_follows_umask(restrictive_umask):
    assert default_file_mode() == 0o640
    assert os.umask(restrictive_umask) == restrictive_umask


def test_csv_writer_uses_default_file_mode(tmp_path, restrictive_umask):
    path = str(tmp_path / "rows.csv")
    atomic_write_csv(path, ["a", "b"], [{"a": 1, "b": 0.5}])
    assert os.stat(path).st_mode & 0o777 == 0o640
    with open(path, newline="") as f:
        assert list(csv.DictReader(f)) == [{"a": "1", "b": "0.5"}]


def test_text_writer_uses_default_file_mode(tmp_path):
    path = str(tmp_path / "dump.json")
    atomic_write_text(path, "{}")
    assert os.stat(path).st_mode & 0o777 == default_file_mode()
    assert open(path).read() == "{}"


def test_writers_leave_no_temp_files(tmp_path):
    atomic_write_text(str(tmp_path / "a.txt"), "x")
    atomic_write_csv(str(tmp_path / "b.csv"), ["k"], [])
    assert sorted(os.listdir(tmp_path)) == ["a.txt", "b.csv"]


def test_unwritable_target_raises_format_error(tmp_path):
    target = tmp_path / "taken"
    target.mkdir()
    (target / "inner").write_text("keep")
    with pytest.raises(FormatError):
        atomic_write_text(str(target), "x")
