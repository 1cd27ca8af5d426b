"""Test the fine-tuning defense sweep."""

# native
from pathlib import Path

# lib
import pytest
import torch

# pkg
from trojanbox.backbone import BackboneCheckpoint
from trojanbox.backbone import DeskResNet
from trojanbox.defense import DefenseCurve
from trojanbox.defense import DefenseEval
from trojanbox.defense import DefenseStrategy
from trojanbox.defense import monotonicity_findings
from trojanbox.defense import plot_curves
from trojanbox.defense import run_finetune_defense
from trojanbox.defense import sweep_defense
from trojanbox.errors import ConfigurationError
from trojanbox.errors import EvaluationError
from trojanbox.errors import UsageError
from trojanbox.images import ImageList
from trojanbox.poison import TriggerPattern
from trojanbox.transfer import CompositeModel
from trojanbox.transfer import DownstreamTask
from trojanbox.transfer import TransferConfig
from trojanbox.transfer import build_classification_task
from trojanbox.transfer import stack_and_finetune


@pytest.fixture(scope="module")
def trained(desk_root: Path) -> tuple:
    """A classification task and a composite trained on it for one epoch."""
    train = ImageList.from_folder(desk_root / "train")
    val = ImageList.from_folder(desk_root / "val")
    task = build_classification_task(train, val, "banana", image_size=16, train_fraction=1.0)
    torch.manual_seed(0)
    ckpt = BackboneCheckpoint.from_model(DeskResNet(num_classes=2), classes=train.classes)
    return task, stack_and_finetune(ckpt, task, TransferConfig(epochs=1, batch_size=8, seed=1))


def _probe() -> DefenseEval:
    return DefenseEval(TriggerPattern(torch.zeros(3, 4, 4), 4, "banana"), area_fraction=0.1, seed=3)


def test_strategy_rules() -> None:
    """Expect the first two stages pinned and named strategies resolved."""
    assert DefenseStrategy.named("Major").unfrozen_stages == ("stage3", "stage4", "stage5")
    assert DefenseStrategy.named("Minor").frozen_stages == ["stage1", "stage2", "stage3", "stage4", "fc"]
    with pytest.raises(ConfigurationError):
        DefenseStrategy("custom", ("stage1", "stage5"))
    with pytest.raises(ConfigurationError):
        DefenseStrategy("custom", ("fc",))
    with pytest.raises(ConfigurationError):
        DefenseStrategy("custom", ())
    with pytest.raises(ConfigurationError):
        DefenseStrategy.named("Everything")


def test_curve_values_in_range(tmp_path: Path) -> None:
    """Expect curves to stay in [0, 1] and survive a write and read."""
    with pytest.raises(EvaluationError):
        DefenseCurve("Minor", 1e-4, 0, "backbone", ["stage5"], 0.9, 0.5, [1.2], [0.5])
    with pytest.raises(EvaluationError):
        DefenseCurve("Minor", 1e-4, 0, "backbone", ["stage5"], 1.5, 0.5, [0.2], [0.5])
    with pytest.raises(EvaluationError):
        DefenseCurve("Minor", 1e-4, 0, "backbone", ["stage5"], 0.9, 0.5, [0.2, 0.1], [0.5])

    curve = DefenseCurve("Minor", 1e-4, 0, "backbone", ["stage5"], 0.9, 0.6, [0.4], [0.7])
    have = DefenseCurve.read(curve.write(tmp_path / "curve.json"))
    assert have == curve
    assert have.epochs == len(have.asr) == 1
    assert have.trace() == ([0.9, 0.4], [0.6, 0.7])


def test_monotonicity_within_tolerance() -> None:
    """Expect small inversions to pass and different rates not to be compared."""
    minor = DefenseCurve("Minor", 1e-4, 0, "backbone", ["stage5"], 0.9, 0.5, [0.50], [0.5])
    close = DefenseCurve("Major", 1e-4, 0, "backbone", ["stage3", "stage4", "stage5"], 0.9, 0.5, [0.54], [0.5])
    other_lr = DefenseCurve("Major", 1e-3, 0, "backbone", ["stage3", "stage4", "stage5"], 0.9, 0.5, [0.9], [0.5])
    assert monotonicity_findings([minor, close, other_lr]) == []


def test_untrained_and_unknown_mode(trained: tuple) -> None:
    """Expect an untrained composite and unknown modes to be refused."""
    task, model = trained
    untrained = CompositeModel(DeskResNet(num_classes=2), "classification", task.classes)
    strategy = DefenseStrategy.named("Minor", 1e-3, 1)
    with pytest.raises(UsageError):
        run_finetune_defense(untrained, task, strategy, _probe())
    with pytest.raises(ConfigurationError):
        run_finetune_defense(model, task, strategy, _probe(), mode="head")
    with pytest.raises(ConfigurationError):
        sweep_defense(model, task, [], [1e-3], _probe())


def test_sweep_leaves_input_untouched(trained: tuple, tmp_path: Path) -> None:
    """Expect one curve per cell, a shared starting point, and the input unchanged."""
    task, model = trained
    assert isinstance(task, DownstreamTask)
    before = model.backbone_hash()
    curves = sweep_defense(model, task, ["Minor", "Major"], [1e-3], _probe(), epochs=1, batch_size=8, seed=2)

    assert [c.strategy for c in curves] == ["Minor", "Major"]
    assert all(c.epochs == len(c.asr) == len(c.clean) == 1 for c in curves)
    assert curves[0].initial_asr == curves[1].initial_asr
    assert curves[0].initial_clean == curves[1].initial_clean
    assert curves[0].seed != curves[1].seed
    assert model.backbone_hash() == before

    again = sweep_defense(model, task, ["Minor"], [1e-3], _probe(), epochs=1, batch_size=8, seed=2)
    assert again[0].asr == curves[0].asr

    path = plot_curves(curves, tmp_path / "defense.png")
    assert path.is_file() and path.stat().st_size > 0
