"""Shared fixtures: a tiny two-class image folder."""

# native
from pathlib import Path

# lib
from PIL import Image
import numpy as np
import pytest

CLASSES = {"apple": (200, 40, 40), "banana": (220, 200, 40)}
"""Class name to mean RGB color."""

SIZE = 16


def write_split(root: Path, per_class: int, seed: int) -> Path:
    """Write `per_class` noisy solid-color PNGs for every class under `root`."""
    rng = np.random.default_rng(seed)
    for name, color in CLASSES.items():
        folder = root / name
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            noise = rng.integers(-30, 31, (SIZE, SIZE, 3))
            pixels = np.clip(np.array(color) + noise, 0, 255).astype(np.uint8)
            Image.fromarray(pixels).save(folder / f"{name}_{i:03d}.png")
    return root


@pytest.fixture(scope="session")
def desk_root(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """Dataset root with `train/` (10 per class) and `val/` (4 per class)."""
    root = tmp_path_factory.mktemp("desk")
    write_split(root / "train", 10, seed=1)
    write_split(root / "val", 4, seed=2)
    return root
