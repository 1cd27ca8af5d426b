"""Test the staged backbone and its checkpoints."""

# native
from pathlib import Path
import json

# lib
import pytest
import torch

# pkg
from trojanbox.backbone import STAGES
from trojanbox.backbone import BackboneCheckpoint
from trojanbox.backbone import DeskResNet
from trojanbox.backbone import build_backbone
from trojanbox.backbone import check_stages
from trojanbox.errors import ConfigurationError
from trojanbox.errors import DataError


def test_stage_names() -> None:
    """Expect every stage name to resolve to a module."""
    net = DeskResNet(num_classes=2)
    for name in STAGES:
        assert isinstance(net.stage(name), torch.nn.Module)
    with pytest.raises(ConfigurationError):
        net.stage("stage6")
    with pytest.raises(ConfigurationError):
        check_stages(["stage1", "head"])


def test_freeze_keeps_norm_in_eval() -> None:
    """Expect frozen stages to stay in eval mode and without gradients."""
    net = DeskResNet(num_classes=2).freeze(["stage1", "stage2"])
    net.train()
    assert not net.stage1.training
    assert not net.stage2.training
    assert net.stage3.training
    assert not any(p.requires_grad for p in net.stage1.parameters())

    net.unfreeze()
    assert net.frozen == []
    assert all(p.requires_grad for p in net.parameters())


def test_frozen_forward_keeps_statistics() -> None:
    """Expect a training-mode forward pass not to touch frozen BatchNorm stats."""
    net = DeskResNet(num_classes=2).freeze(["stage1"])
    before = net.stage_hash(["stage1"])
    after_stage3 = net.stage_hash(["stage3"])
    net.train()
    net(torch.rand(4, 3, 16, 16))
    assert net.stage_hash(["stage1"]) == before
    assert net.stage_hash(["stage3"]) != after_stage3


def test_checkpoint_save_load(tmp_path: Path) -> None:
    """Expect weights and metadata to be read back and verified."""
    torch.manual_seed(0)
    ckpt = BackboneCheckpoint.from_model(
        DeskResNet(num_classes=3), poison_spec_hash="abc", seed=4, classes=["a", "b", "c"], history=[{"epoch": 1}]
    )
    digest = ckpt.save(tmp_path / "backbone.pt")
    assert len(digest) == 64

    have = BackboneCheckpoint.load(tmp_path / "backbone.pt")
    assert have.hash == ckpt.hash
    assert (have.poison_spec_hash, have.seed, have.classes) == ("abc", 4, ["a", "b", "c"])
    assert have.build()(torch.rand(1, 3, 16, 16)).shape == (1, 3)


def test_checkpoint_tampered(tmp_path: Path) -> None:
    """Expect a sidecar that does not match the weights to be rejected."""
    path = tmp_path / "backbone.pt"
    BackboneCheckpoint.from_model(DeskResNet(num_classes=2)).save(path)
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text())
    meta["state_hash"] = "0" * 64
    sidecar.write_text(json.dumps(meta))
    with pytest.raises(DataError):
        BackboneCheckpoint.load(path)
    with pytest.raises(DataError):
        BackboneCheckpoint.load(tmp_path / "missing.pt")


def test_unknown_architecture() -> None:
    """Expect only registered architectures."""
    with pytest.raises(ConfigurationError):
        build_backbone("resnet152", 10)
