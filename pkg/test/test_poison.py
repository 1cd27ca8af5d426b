"""Test trigger composition and poisoned dataset synthesis."""

# native
from pathlib import Path
import math

# lib
import numpy as np
import pytest
import torch

# pkg
from trojanbox.errors import ConfigurationError
from trojanbox.errors import DimensionError
from trojanbox.errors import PlacementError
from trojanbox.images import ImageList
from trojanbox.metrics import Box
from trojanbox.poison import PoisonManifest
from trojanbox.poison import PoisonSpec
from trojanbox.poison import TriggerPattern
from trojanbox.poison import apply_baseline_trigger
from trojanbox.poison import apply_trigger_test
from trojanbox.poison import composite
from trojanbox.poison import context_free_sample
from trojanbox.poison import make_baseline_trigger
from trojanbox.poison import poison_classification_dataset
from trojanbox.poison import poison_count

CONTEXT_FREE = {"canvas": "white", "canvas_range": [24, 32], "trigger_range": [6, 12]}


def _trigger() -> TriggerPattern:
    image = torch.zeros(3, 8, 8)
    image[0] = 1.0
    return TriggerPattern(image, 8, "banana")


def test_composite_identities() -> None:
    """Expect M = 0 to keep x and M = 1 to give the trigger."""
    x, t = torch.rand(3, 5, 5), torch.rand(3, 5, 5)
    assert torch.equal(composite(x, t, torch.zeros(5, 5)), x)
    assert torch.equal(composite(x, t, torch.ones(5, 5)), t)


def test_composite_stays_between_inputs() -> None:
    """Expect any fractional mask to give pixels between x and the trigger."""
    gen = torch.Generator().manual_seed(4)
    for _ in range(10):
        x = torch.rand(3, 6, 6, generator=gen)
        t = torch.rand(3, 6, 6, generator=gen)
        mask = torch.rand(6, 6, generator=gen)
        have = composite(x, t, mask)
        assert (have >= torch.minimum(x, t) - 1e-6).all()
        assert (have <= torch.maximum(x, t) + 1e-6).all()


def test_composite_shape_mismatch() -> None:
    """Expect mismatched shapes to be rejected."""
    with pytest.raises(DimensionError):
        composite(torch.rand(3, 5, 5), torch.rand(3, 4, 4), torch.zeros(5, 5))
    with pytest.raises(DimensionError):
        composite(torch.rand(3, 5, 5), torch.rand(3, 5, 5), torch.zeros(4, 4))


@pytest.mark.parametrize("canvas, value", [("white", 1.0), ("grey", 0.5), ("black", 0.0)])
def test_context_free_canvas_outside_box(canvas: str, value: float) -> None:
    """Expect every pixel outside the attack box to be the canvas value."""
    rng = np.random.default_rng(5)
    for _ in range(10):
        sample = context_free_sample(_trigger(), (24, 32), (6, 12), rng, background=value)
        _, height, width = sample.image.shape
        assert height == width and 24 <= height <= 32
        assert sample.attack_box is not None
        assert sample.attack_box.inside(width, height)
        outside = ~torch.from_numpy(sample.attack_box.rasterize(height, width))
        assert bool((sample.image[:, outside] == value).all())


def test_context_free_trigger_bigger_than_canvas() -> None:
    """Expect trigger ranges that cannot fit to be rejected."""
    with pytest.raises(ConfigurationError):
        context_free_sample(_trigger(), (16, 32), (8, 20), np.random.default_rng(0))


def test_poison_count_rounds_half_up() -> None:
    """Expect N = round(ratio * |D|) with halves rounded up."""
    assert poison_count(5000, 0.01) == 50
    assert poison_count(50, 0.01) == 1
    assert poison_count(49, 0.01) == 0


def test_context_free_appends(desk_root: Path) -> None:
    """Expect synthesized samples appended after the untouched clean ones."""
    train = ImageList.from_folder(desk_root / "train")
    spec = PoisonSpec("context_free", 0.1, "banana", 1, CONTEXT_FREE, seed=3)
    manifest = poison_classification_dataset(train, spec, _trigger())

    assert manifest.counts == {"total": 22, "poisoned": 2, "clean": 20}
    clean = [(e.path, e.label) for e in manifest.entries if not e.poisoned]
    assert clean == train.samples
    poisoned = [e for e in manifest.entries if e.poisoned]
    assert all(e.label == 1 and e.attack_box is not None for e in poisoned)


def test_badnets_relabels(desk_root: Path, tmp_path: Path) -> None:
    """Expect N clean samples replaced by composited, relabeled copies."""
    train = ImageList.from_folder(desk_root / "train")
    trigger, mask = make_baseline_trigger("badnets", {"patch_size": 4}, 16)
    spec = PoisonSpec("badnets", 0.1, "banana", 1, {"patch_size": 4}, seed=3)
    manifest = poison_classification_dataset(train, spec, trigger, mask=mask, out_dir=tmp_path)

    assert manifest.counts == {"total": 20, "poisoned": 2, "clean": 18}
    poisoned = [e for e in manifest.entries if e.poisoned]
    assert all(e.label == 1 for e in poisoned)
    assert all(e.attack_box == Box.from_corner(12, 12, 4, 4) for e in poisoned)
    assert all((tmp_path / e.path).is_file() for e in poisoned)


def test_recount_from_manifest(desk_root: Path, tmp_path: Path) -> None:
    """Expect the written manifest to recount to the requested number."""
    train = ImageList.from_folder(desk_root / "train")
    trigger, mask = make_baseline_trigger("badnets", {"patch_size": 4}, 16)
    spec = PoisonSpec("badnets", 0.25, "apple", 0, {"patch_size": 4})
    path = poison_classification_dataset(train, spec, trigger, mask=mask).write(tmp_path / "manifest.jsonl")

    have = PoisonManifest.read(path)
    assert sum(e.poisoned for e in have.entries) == poison_count(len(train), 0.25) == 5
    assert have.spec.hash() == spec.hash()


def test_poisoning_is_deterministic(desk_root: Path) -> None:
    """Expect the same manifest for the same seed, serial or threaded."""
    train = ImageList.from_folder(desk_root / "train")
    spec = PoisonSpec("context_free", 0.2, "banana", 1, CONTEXT_FREE, seed=9)
    a = poison_classification_dataset(train, spec, _trigger())
    b = poison_classification_dataset(train, spec, _trigger(), workers=2)
    assert a.to_jsonl() == b.to_jsonl()

    other = PoisonSpec("context_free", 0.2, "banana", 1, CONTEXT_FREE, seed=10)
    assert poison_classification_dataset(train, other, _trigger()).to_jsonl() != a.to_jsonl()


def test_ratio_rounds_to_zero(desk_root: Path) -> None:
    """Expect an error instead of an unpoisoned dataset."""
    train = ImageList.from_folder(desk_root / "train")
    spec = PoisonSpec("context_free", 0.01, "banana", 1, CONTEXT_FREE)
    with pytest.raises(ConfigurationError, match="too small"):
        poison_classification_dataset(train, spec, _trigger())


def test_unknown_target(desk_root: Path) -> None:
    """Expect a target outside the vocabulary to be rejected."""
    train = ImageList.from_folder(desk_root / "train")
    spec = PoisonSpec("context_free", 0.1, "cherry", 2, CONTEXT_FREE)
    with pytest.raises(ConfigurationError):
        poison_classification_dataset(train, spec, _trigger())


def test_badnets_patch() -> None:
    """Expect a white bottom-right patch and nothing else changed."""
    trigger, mask = make_baseline_trigger("badnets", {"patch_size": 8}, 64)
    x = torch.full((3, 64, 64), 0.25)
    out = apply_baseline_trigger(x, trigger, mask)
    assert int(mask.sum()) == 64
    assert bool((out[:, 56:, 56:] == 1.0).all())
    assert torch.equal(out[:, :56, :], x[:, :56, :])


def test_blended_is_convex_combination() -> None:
    """Expect every pixel to be 0.8 x + 0.2 t."""
    trigger, mask = make_baseline_trigger("blended", {"opacity": 0.2, "seed": 4}, 8)
    x = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(1))
    out = apply_baseline_trigger(x, trigger, mask)
    for c in range(3):
        for i in range(8):
            for j in range(8):
                want = 0.8 * x[c, i, j].item() + 0.2 * trigger.image[c, i, j].item()
                assert out[c, i, j].item() == pytest.approx(want, abs=1e-6)


def test_sig_is_additive() -> None:
    """Expect a horizontal sinusoid of amplitude 40/255 added to the image."""
    trigger, mask = make_baseline_trigger("sig", {"sig_delta": 40, "sig_frequency": 6}, 32)
    x = torch.full((3, 32, 32), 0.5)
    out = apply_baseline_trigger(x, trigger, mask)
    delta = 40 / 255
    cols = torch.arange(32, dtype=torch.float32)
    want = 0.5 + delta * torch.sin(2 * math.pi * cols * 6 / 32)
    assert torch.allclose(out[1, 7], want, atol=1e-6)
    assert torch.equal(out[:, 0], out[:, 31])


def test_test_time_area() -> None:
    """Expect test-time triggers to cover the requested area fraction."""
    _, box = apply_trigger_test(torch.ones(3, 100, 100), _trigger(), np.random.default_rng(1), 0.05)
    assert (box.w, box.h) == (22, 22)

    rng = np.random.default_rng(2)
    for _ in range(20):
        image, box = apply_trigger_test(torch.ones(3, 64, 48), _trigger(), rng, 0.05)
        assert box.inside(48, 64)
        assert image.shape == (3, 64, 48)


def test_test_time_too_big() -> None:
    """Expect a trigger larger than the image to be rejected."""
    trigger = TriggerPattern(torch.zeros(3, 8, 8), nominal_size=80)
    with pytest.raises(PlacementError):
        apply_trigger_test(torch.ones(3, 32, 32), trigger, np.random.default_rng(0), None)


def test_trigger_save_load(tmp_path: Path) -> None:
    """Expect the PNG and its metadata to be read back."""
    pixels = torch.randint(0, 256, (3, 6, 9), generator=torch.Generator().manual_seed(0)).float() / 255
    trigger = TriggerPattern(pixels, 80, "banana", {"method": "context_free", "seed": 3})
    have = TriggerPattern.load(trigger.save(tmp_path / "trigger.png"))
    assert torch.allclose(have.image, pixels, atol=1e-6)
    assert (have.nominal_size, have.target_label, have.provenance) == (80, "banana", trigger.provenance)
