"""Datasets, seeded loaders, and dataset ingestion."""

# native
from __future__ import annotations
from pathlib import Path
from typing import Any
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
import logging
import os
import random

# lib
from torch.utils.data import DataLoader
from torch.utils.data import Dataset
from torchvision import transforms
from tqdm import tqdm
import numpy as np
import torch

# pkg
from .errors import ConfigurationError
from .images import ImageList
from .images import load_image
from .images import save_image
from .poison import PoisonManifest
from .poison import TriggerPattern
from .poison import trigger_test_image

__all__ = [
    "seed_everything",
    "augmentation",
    "FolderDataset",
    "ManifestDataset",
    "TriggeredDataset",
    "make_loader",
    "sample_fraction",
    "load_images",
    "ingest",
]

log = logging.getLogger(__name__)

Sample = Tuple[torch.Tensor, int]


def seed_everything(seed: int, deterministic: bool = False) -> None:
    """Seed python, numpy, and torch; optionally request deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False


def augmentation(names: Sequence[str], size: int) -> Optional[transforms.Compose]:
    """Return the training augmentation for `names` (`flip`, `crop`)."""
    steps: List[Any] = []
    if "crop" in names:
        steps.append(transforms.RandomCrop(size, padding=max(1, size // 16), padding_mode="reflect"))
    if "flip" in names:
        steps.append(transforms.RandomHorizontalFlip())
    return transforms.Compose(steps) if steps else None


class FolderDataset(Dataset):  # type: ignore[type-arg]
    """Labeled images of an `ImageList`, resized to `size`."""

    def __init__(self, images: ImageList, size: int, transform: Optional[Any] = None):
        self.images = images
        self.size = size
        self.transform = transform

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int) -> Sample:
        image = self.images.load(index, self.size)
        if self.transform is not None:
            image = self.transform(image)
        return image, self.images.samples[index][1]


class ManifestDataset(Dataset):  # type: ignore[type-arg]
    """A poisoned training set read back from its manifest.

    Clean entries resolve against `clean_root`; poisoned ones against the
    manifest's directory. Poisoned samples are augmented only when
    `augment_poison` is set.
    """

    def __init__(
        self,
        manifest_path: Path,
        clean_root: Path,
        size: int,
        transform: Optional[Any] = None,
        *,
        augment_poison: bool = True,
    ):
        self.manifest = PoisonManifest.read(manifest_path)
        self.poison_root = manifest_path.parent
        self.clean_root = Path(clean_root)
        self.size = size
        self.transform = transform
        self.augment_poison = augment_poison

    def __len__(self) -> int:
        return len(self.manifest.entries)

    def __getitem__(self, index: int) -> Sample:
        entry = self.manifest.entries[index]
        root = self.poison_root if entry.poisoned else self.clean_root
        image = load_image(root / entry.path, self.size)
        if self.transform is not None and (self.augment_poison or not entry.poisoned):
            image = self.transform(image)
        return image, entry.label


class TriggeredDataset(Dataset):  # type: ignore[type-arg]
    """Validation images with the trigger applied at test time.

    Placement for image `i` draws from a stream seeded by `(seed, i)`, so the
    triggered set is identical across runs and loader orders. Items are
    `(image, true_label)`.
    """

    def __init__(
        self,
        images: ImageList,
        size: int,
        trigger: TriggerPattern,
        mask: Optional[torch.Tensor] = None,
        *,
        area_fraction: Optional[float] = 0.05,
        seed: int = 0,
        random_placement: bool = False,
    ):
        self.images = images
        self.size = size
        self.trigger = trigger
        self.mask = mask
        self.area_fraction = area_fraction
        self.seed = seed
        self.random_placement = random_placement

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int) -> Sample:
        image = self.images.load(index, self.size)
        rng = np.random.default_rng([self.seed, index])
        triggered, _ = trigger_test_image(
            image,
            self.trigger,
            self.mask,
            rng,
            area_fraction=self.area_fraction,
            random_placement=self.random_placement,
        )
        return triggered, self.images.samples[index][1]


def _seed_worker(worker_id: int) -> None:
    seed = torch.initial_seed() % 2**32
    np.random.seed(seed)
    random.seed(seed)


def make_loader(
    dataset: Dataset,  # type: ignore[type-arg]
    batch_size: int,
    *,
    shuffle: bool = False,
    seed: int = 0,
    workers: int = 0,
    collate_fn: Optional[Any] = None,
) -> DataLoader:  # type: ignore[type-arg]
    """Return a `DataLoader` whose order depends only on `seed`."""
    gen = torch.Generator()
    gen.manual_seed(seed)
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        num_workers=workers,
        worker_init_fn=_seed_worker,
        generator=gen,
        collate_fn=collate_fn,
    )


def sample_fraction(images: ImageList, fraction: float, seed: int) -> ImageList:
    """Return a seeded subset with `round(fraction * len)` samples (at least 1).

    Examples:
        >>> images = ImageList(Path("."), [(f"{i}.png", i % 2) for i in range(10)], ["a", "b"])
        >>> len(sample_fraction(images, 0.3, seed=1))
        3
        >>> sample_fraction(images, 0.3, 1).samples == sample_fraction(images, 0.3, 1).samples
        True
    """
    if not 0 < fraction <= 1:
        raise ConfigurationError(f"fraction must be in (0, 1], got {fraction}")
    count = max(1, int(round(fraction * len(images))))
    chosen = np.random.default_rng([seed, len(images)]).choice(len(images), count, replace=False)
    return images.subset(sorted(chosen.tolist()))


def load_images(images: ImageList, size: int, limit: Optional[int] = None) -> torch.Tensor:
    """Stack up to `limit` images into an `Nx3xSxS` tensor."""
    count = len(images) if limit is None else min(limit, len(images))
    if count == 0:
        raise ConfigurationError(f"no images under {images.root}")
    return torch.stack([images.load(i, size) for i in range(count)])


def ingest(
    root: Path,
    *,
    dataset: str = "cifar10",
    size: int = 64,
    per_class: Optional[int] = None,
    download_dir: Optional[Path] = None,
    progress: bool = True,
) -> Tuple[ImageList, ImageList]:
    """Export a torchvision dataset into `root/train/<class>/` and `root/val/<class>/`.

    Images are upscaled to `size` and written as PNG. `per_class` caps the
    number of training images kept per class (validation keeps a fifth of
    that).
    """
    # lib
    from torchvision import datasets

    loaders = {"cifar10": datasets.CIFAR10}
    if dataset not in loaders:
        raise ConfigurationError(f"unsupported dataset {dataset!r}; expected one of {list(loaders)}")

    cache = download_dir or (root / ".download")
    for split, train in (("train", True), ("val", False)):
        source = loaders[dataset](str(cache), train=train, download=True)
        limit = per_class if train or per_class is None else max(1, per_class // 5)
        kept = {name: 0 for name in source.classes}
        for index in tqdm(range(len(source)), desc=f"ingest {split}", disable=not progress):
            pil, label = source[index]
            name = source.classes[label]
            if limit is not None and kept[name] >= limit:
                continue
            kept[name] += 1
            image = transforms.functional.to_tensor(pil.resize((size, size)))
            save_image(image, root / split / name / f"{index:05d}.png")
        log.info("ingested %s %s: %d images", dataset, split, sum(kept.values()))

    return ImageList.from_folder(root / "train"), ImageList.from_folder(root / "val")
