"""Test `AttrDict`."""

# native
from pathlib import Path
from typing import Any
from typing import Dict
import json
import sys

# no cover: start
# Coverage disabled to cover all python versions.
# TODO 2026-10-31 @ py3.10 EOL: remove conditional
if sys.version_info >= (3, 11):
    import tomllib as toml
else:
    import tomli as toml
# no cover: stop

# pkg
from trojanbox.attrdict import AttrDict
from trojanbox.attrdict import get_path
from trojanbox.attrdict import set_path

HERE = Path(__file__).parent / "fixtures"


def test_lshift_json() -> None:
    """Expect to load a JSON config."""
    path = HERE / "base.json"
    config = AttrDict() << json.load(path.open(encoding="utf-8"))

    have = config.get(["transfer", "tasks", 0])
    want = "classification"
    assert want == have, "expect to get valid value"


def test_lshift_toml() -> None:
    """Expect to load a TOML config."""
    path = HERE / "base.toml"
    config = AttrDict() << toml.loads(path.read_text())

    want = "banana"
    have = config.get("poison.target_label".split("."))
    assert want == have, f"expect to get {want}"
    assert isinstance(config.poison, AttrDict), "expect nested sections to convert"


def test_merge_empty() -> None:
    """Expect no change."""
    one = AttrDict(seed=1, out="runs")
    two: Dict[Any, Any] = {}

    want = dict(seed=1, out="runs")
    have = one << two
    assert want == have, "expect no change"


def test_update() -> None:
    """Expect basic merges to overwrite values."""
    one = AttrDict(seed=1, out="runs")
    want = dict(seed=3, out="runs")
    have = one << dict(seed=3)
    assert want == have, "expect overwrite one value"

    one = AttrDict(seed=1, out="runs")
    want = dict(seed=3, out="elsewhere")
    have = one << dict(seed=3, out="elsewhere")
    assert want == have, "expect overwrite both"


def test_nested() -> None:
    """Expect sections to merge key by key."""
    one = AttrDict(seed=1, poison=dict(ratio=0.01, canvas="white"))
    two = dict(poison=dict(canvas="grey"))

    want = dict(seed=1, poison=dict(ratio=0.01, canvas="grey"))
    have = one << two
    assert want == have, "expect 1-nested merge"


def test_lists_replace() -> None:
    """Expect lists to be replaced, not concatenated."""
    one = AttrDict(transfer=dict(tasks=["classification", "detection"]))
    have = one << dict(transfer=dict(tasks=["segmentation"]))
    assert have.transfer.tasks == ["segmentation"]


def test_missing_is_none() -> None:
    """Expect missing keys and attributes to be `None`."""
    cfg = AttrDict(poison={"ratio": 0.01})
    assert cfg.defense is None
    assert cfg["defense"] is None
    assert cfg.get(["poison", "canvas"]) is None
    assert ["poison", "ratio"] in cfg
    assert ["poison", "canvas"] not in cfg


def test_set_by_path() -> None:
    """Expect list keys to create intermediate sections."""
    cfg = AttrDict()
    cfg[["eval", "iou"]] = 0.75
    assert cfg.eval.iou == 0.75
    assert isinstance(cfg.eval, AttrDict)


def test_copy_is_deep() -> None:
    """Expect copies not to share sections."""
    cfg = AttrDict(poison={"ratio": 0.01})
    clone = cfg.copy()
    clone.poison.ratio = 0.5
    assert cfg.poison.ratio == 0.01


def test_to_dict() -> None:
    """Expect plain dicts all the way down."""
    cfg = AttrDict(poison={"canvas_range": [65, 128]})
    have = cfg.to_dict()
    assert type(have["poison"]) is dict
    assert json.loads(json.dumps(have)) == {"poison": {"canvas_range": [65, 128]}}


def test_get_path_list_index() -> None:
    """Expect indexes into lists to work."""
    assert get_path({"a": [{"b": 2}]}, ["a", 0, "b"]) == 2
    assert get_path({"a": [1]}, ["a", 3], "missing") == "missing"


def test_set_path_replaces_scalar() -> None:
    """Expect a scalar in the way to become a section."""
    have = set_path({"eval": 1}, ["eval", "iou"], 0.5)
    want = {"eval": {"iou": 0.5}}
    assert want == have
