"""Test downstream heads, synthetic scenes, and attack evaluation."""

# native
from pathlib import Path

# lib
import pytest
import torch

# pkg
from trojanbox.backbone import BackboneCheckpoint
from trojanbox.backbone import DeskResNet
from trojanbox.errors import ConfigurationError
from trojanbox.errors import DataError
from trojanbox.errors import UsageError
from trojanbox.images import ImageList
from trojanbox.metrics import Detection
from trojanbox.poison import TriggerPattern
from trojanbox.transfer import CompositeModel
from trojanbox.transfer import DetectionScenes
from trojanbox.transfer import TransferConfig
from trojanbox.transfer import attack_success
from trojanbox.transfer import build_classification_task
from trojanbox.transfer import build_toy_detection_dataset
from trojanbox.transfer import evaluate_task
from trojanbox.transfer import infer
from trojanbox.transfer import read_annotations
from trojanbox.transfer import stack_and_finetune
from trojanbox.transfer import task_subset
from trojanbox.transfer import write_annotations

TINY = TransferConfig(epochs=1, batch_size=8, learning_rate=0.01, seed=1)


def _checkpoint() -> BackboneCheckpoint:
    torch.manual_seed(0)
    return BackboneCheckpoint.from_model(DeskResNet(num_classes=2), classes=["apple", "banana"])


def _splits(root: Path) -> tuple:
    return ImageList.from_folder(root / "train"), ImageList.from_folder(root / "val")


def test_scenes_inside_canvas(desk_root: Path) -> None:
    """Expect every object box inside the scene and balanced class counts."""
    train, _ = _splits(desk_root)
    scenes = DetectionScenes(train, 12, size=32, object_size=(8, 16), seed=3, masks=True)
    for index in range(len(scenes)):
        scene = scenes.scene(index)
        assert scene.image.shape == (3, 32, 32)
        assert 1 <= len(scene.objects) <= 4
        for obj in scene.objects:
            assert obj.box.inside(32, 32)
            assert obj.mask is not None and obj.mask.shape == (32, 32)

    counts = scenes.class_counts()
    assert max(counts.values()) - min(counts.values()) <= 1


def test_scenes_are_deterministic(desk_root: Path) -> None:
    """Expect scene `i` to depend only on the seed and the index."""
    train, _ = _splits(desk_root)
    a = DetectionScenes(train, 6, size=32, object_size=(8, 16), seed=5)
    b = DetectionScenes(train, 6, size=32, object_size=(8, 16), seed=5)
    assert torch.equal(a.scene(4).image, b.scene(4).image)
    assert [o.box for o in a.scene(4).objects] == [o.box for o in b.scene(4).objects]

    other = DetectionScenes(train, 6, size=32, object_size=(8, 16), seed=6)
    assert not torch.equal(a.scene(4).image, other.scene(4).image)
    with pytest.raises(IndexError):
        a.scene(6)


def test_scene_objects_must_fit(desk_root: Path) -> None:
    """Expect objects larger than the scene to be rejected."""
    train, _ = _splits(desk_root)
    with pytest.raises(ConfigurationError):
        DetectionScenes(train, 2, size=32, object_size=(16, 48))


def test_annotations_keep_masks(desk_root: Path, tmp_path: Path) -> None:
    """Expect boxes and RLE masks to be read back as written."""
    train, _ = _splits(desk_root)
    scenes = DetectionScenes(train, 3, size=32, object_size=(8, 16), seed=2, masks=True)
    have = read_annotations(write_annotations(scenes, tmp_path))

    assert sorted(have) == ["000000.png", "000001.png", "000002.png"]
    assert (tmp_path / "images" / "000002.png").is_file()
    want = scenes.scene(1).objects
    assert [o.box for o in have["000001.png"]] == [o.box for o in want]
    assert all((h.mask == w.mask).all() for h, w in zip(have["000001.png"], want))


def test_task_vocabulary(desk_root: Path) -> None:
    """Expect the target to be part of the task vocabulary."""
    train, val = _splits(desk_root)
    with pytest.raises(ConfigurationError):
        build_classification_task(train, val, "cherry")
    with pytest.raises(ConfigurationError):
        TransferConfig(epochs=0)


def test_task_subset_is_seeded() -> None:
    """Expect `round(fraction * len)` samples, at least one, fixed by the seed."""
    data = list(range(50))
    assert len(task_subset(data, 0.1, 0)) == 5  # type: ignore[arg-type]
    assert len(task_subset(data, 0.001, 0)) == 1  # type: ignore[arg-type]
    a = task_subset(data, 0.2, 4)  # type: ignore[arg-type]
    b = task_subset(data, 0.2, 4)  # type: ignore[arg-type]
    assert list(a.indices) == list(b.indices)  # type: ignore[attr-defined]


def test_untrained_composite() -> None:
    """Expect inference on an untrained head to be refused."""
    model = CompositeModel(DeskResNet(num_classes=2), "classification", ["apple", "banana"])
    with pytest.raises(UsageError):
        infer(model, torch.rand(1, 3, 16, 16))
    with pytest.raises(ConfigurationError):
        CompositeModel(DeskResNet(num_classes=2), "captioning", ["apple"])


def test_classification_transfer(desk_root: Path, tmp_path: Path) -> None:
    """Expect a frozen backbone, posteriors that sum to one, and ASR bookkeeping."""
    train, val = _splits(desk_root)
    task = build_classification_task(train, val, "banana", image_size=16, train_fraction=1.0)
    ckpt = _checkpoint()
    model = stack_and_finetune(ckpt, task, TINY)

    assert model.backbone_hash() == CompositeModel(ckpt.build(), "classification", task.classes).backbone_hash()
    assert len(model.history) == 1

    posteriors = infer(model, torch.rand(3, 3, 16, 16))
    assert len(posteriors) == 3
    assert all(float(p.sum()) == pytest.approx(1.0, abs=1e-5) for p in posteriors)
    assert infer(model, []) == []

    assert 0.0 <= evaluate_task(model, task) <= 1.0
    trigger = TriggerPattern(torch.zeros(3, 4, 4), 4, "banana")
    stats = attack_success(model, task, trigger, area_fraction=0.1, seed=2)
    assert stats["excluded"] == 4
    assert stats["total"] == 4
    assert 0 <= stats["successes"] <= 4

    path = model.save(tmp_path / "head.pt")
    again = CompositeModel.load(path, ckpt)
    assert torch.equal(again.head.fc.weight, model.head.fc.weight)  # type: ignore[union-attr]
    torch.manual_seed(9)
    other = BackboneCheckpoint.from_model(DeskResNet(num_classes=2))
    with pytest.raises(DataError):
        CompositeModel.load(path, other)


def test_detection_transfer(desk_root: Path) -> None:
    """Expect detections sorted by confidence and attack stats in range."""
    train, val = _splits(desk_root)
    task = build_toy_detection_dataset(
        train, val, "banana", scenes=10, size=32, object_size=(8, 16), train_fraction=1.0, seed=1
    )
    model = stack_and_finetune(_checkpoint(), task, TransferConfig(epochs=1, batch_size=5, seed=1))

    (dets,) = infer(model, [task.val.scene(0).image], conf_floor=0.0)  # type: ignore[attr-defined]
    assert all(isinstance(d, Detection) for d in dets)
    confidences = [d.confidence for d in dets]
    assert confidences == sorted(confidences, reverse=True)

    assert 0.0 <= evaluate_task(model, task) <= 1.0
    trigger = TriggerPattern(torch.zeros(3, 4, 4), 4, "banana")
    stats = attack_success(model, task, trigger, area_fraction=0.05, seed=3)
    assert 0.0 <= stats["asr"] <= 1.0
