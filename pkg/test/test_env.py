"""Test `.env` loading and dataset root overrides."""

# native
from pathlib import Path
import os

# lib
import pytest

# pkg
from trojanbox.env import DATA_ROOT_VAR
from trojanbox.env import data_root
from trojanbox.env import expand
from trojanbox.env import find_env
from trojanbox.env import load_env
from trojanbox.env import loads


def test_expand_braces_and_bare() -> None:
    """Expect both `$VAR` and `${VAR}` forms."""
    store = {"ROOT": "/data", "SPLIT": "val"}
    assert expand("$ROOT/${SPLIT}/x", store) == "/data/val/x"
    assert expand("no vars", store) == "no vars"


def test_loads_quotes_and_comments() -> None:
    """Expect quotes stripped and comments ignored."""
    text = """
    # comment
    export A="one two"
    B='plain'
    C=$A/three
    """
    have = loads(text, update_env=False)
    want = {"A": "one two", "B": "plain", "C": "one two/three"}
    assert want == have


def test_loads_update_env(monkeypatch: pytest.MonkeyPatch) -> None:
    """Expect values to reach the environment when asked."""
    monkeypatch.setenv("TROJANBOX_TEST_VALUE", "")
    loads("TROJANBOX_TEST_VALUE=42")
    assert os.environ["TROJANBOX_TEST_VALUE"] == "42"


def test_find_env_in_parents(tmp_path: Path) -> None:
    """Expect the nearest `.env` going up the tree."""
    (tmp_path / ".env").write_text("X=1\n")
    nested = tmp_path / "a" / "b"
    nested.mkdir(parents=True)
    assert find_env(nested) == tmp_path / ".env"


def test_load_env_sets_data_root(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    """Expect a `.env` file to override `data.root`."""
    monkeypatch.setenv(DATA_ROOT_VAR, "")
    (tmp_path / ".env").write_text(f"{DATA_ROOT_VAR}={tmp_path}/desk\n")
    loaded = load_env(tmp_path)
    assert loaded == {DATA_ROOT_VAR: f"{tmp_path}/desk"}
    assert data_root("/configured") == f"{tmp_path}/desk"


def test_data_root_expands(monkeypatch: pytest.MonkeyPatch) -> None:
    """Expect the configured root to expand when no override is set."""
    monkeypatch.delenv(DATA_ROOT_VAR, raising=False)
    monkeypatch.setenv("TROJANBOX_TEST_HOME", "/home/desk")
    assert data_root("$TROJANBOX_TEST_HOME/data") == "/home/desk/data"
