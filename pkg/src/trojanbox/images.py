"""Image I/O, resizing, and content hashing."""

# native
from __future__ import annotations
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable
from typing import List
from typing import Mapping
from typing import Optional
from typing import Tuple
from typing import Union
import hashlib

# lib
from PIL import Image
import numpy as np
import torch
import torch.nn.functional as F
from torchvision.transforms import functional as TF

# pkg
from .errors import DimensionError

__all__ = [
    "IMAGE_SUFFIXES",
    "load_image",
    "save_image",
    "list_images",
    "resize",
    "check_rgb",
    "file_hash",
    "tensor_hash",
    "state_hash",
    "ImageList",
]

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")

PathStr = Union[Path, str]
Size = Tuple[int, int]


def load_image(path: PathStr, size: Optional[Union[int, Size]] = None) -> torch.Tensor:
    """Load an image as a 3xHxW float tensor in [0, 1], optionally resized."""
    with Image.open(path) as img:
        tensor = TF.to_tensor(img.convert("RGB"))
    if size is not None:
        tensor = resize(tensor, size)
    return tensor


def save_image(image: torch.Tensor, path: PathStr) -> Path:
    """Save a 3xHxW tensor in [0, 1] as a lossless PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    check_rgb(image)
    array = (image.detach().cpu().clamp(0, 1) * 255).round().to(torch.uint8)
    Image.fromarray(array.permute(1, 2, 0).numpy()).save(path, format="PNG")
    return path


def list_images(folder: PathStr) -> List[Path]:
    """Return image files in `folder`, sorted by name."""
    return sorted(p for p in Path(folder).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def check_rgb(image: torch.Tensor) -> torch.Tensor:
    """Raise `DimensionError` unless `image` is 3xHxW with H, W >= 1.

    Examples:
        >>> check_rgb(torch.zeros(3, 2, 2)).shape
        torch.Size([3, 2, 2])
        >>> check_rgb(torch.zeros(1, 2, 2))
        Traceback (most recent call last):
          ...
        trojanbox.errors.DimensionError: expected a 3xHxW image, got (1, 2, 2)
    """
    if image.dim() != 3 or image.shape[0] != 3 or image.shape[1] < 1 or image.shape[2] < 1:
        raise DimensionError(f"expected a 3xHxW image, got {tuple(image.shape)}")
    return image


def resize(image: torch.Tensor, size: Union[int, Size], *, mode: str = "bilinear") -> torch.Tensor:
    """Resize a CxHxW tensor to `size` (int means square) and clamp to [0, 1].

    Examples:
        >>> resize(torch.rand(3, 10, 20), (5, 8)).shape
        torch.Size([3, 5, 8])
        >>> resize(torch.ones(1, 4, 4), 2, mode="nearest").sum().item()
        4.0
    """
    height, width = (size, size) if isinstance(size, int) else size
    if tuple(image.shape[-2:]) == (height, width):
        return image.clone()

    batch = image.unsqueeze(0)
    if mode == "nearest":
        out = F.interpolate(batch, size=(height, width), mode="nearest")
    else:
        out = F.interpolate(batch, size=(height, width), mode=mode, align_corners=False, antialias=True)
    return out.squeeze(0).clamp(0, 1)


def file_hash(path: PathStr) -> str:
    """Return the sha256 hex digest of a file."""
    digest = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def tensor_hash(tensors: Iterable[torch.Tensor]) -> str:
    """Return a sha256 digest over tensor shapes, dtypes, and bytes.

    Examples:
        >>> a = tensor_hash([torch.ones(2, 2)])
        >>> a == tensor_hash([torch.ones(2, 2)]), a == tensor_hash([torch.zeros(2, 2)])
        (True, False)
    """
    digest = hashlib.sha256()
    for tensor in tensors:
        array = tensor.detach().cpu().contiguous().numpy()
        digest.update(f"{array.dtype}{array.shape}".encode("utf-8"))
        digest.update(np.ascontiguousarray(array).tobytes())
    return digest.hexdigest()


def state_hash(state: Mapping[str, torch.Tensor], prefixes: Optional[Iterable[str]] = None) -> str:
    """Hash a state dict, optionally only the keys under `prefixes`.

    Examples:
        >>> net = torch.nn.Sequential(torch.nn.Linear(2, 2), torch.nn.Linear(2, 1))
        >>> before = state_hash(net.state_dict(), ["0."])
        >>> with torch.no_grad():
        ...     _ = net[1].weight.add_(1)
        >>> state_hash(net.state_dict(), ["0."]) == before
        True
    """
    keys = sorted(state)
    if prefixes is not None:
        wanted = tuple(prefixes)
        keys = [k for k in keys if k.startswith(wanted)]

    digest = hashlib.sha256()
    for key in keys:
        digest.update(key.encode("utf-8"))
        digest.update(tensor_hash([state[key]]).encode("utf-8"))
    return digest.hexdigest()


@dataclass
class ImageList:
    """Labeled images in an ImageFolder layout (`root/<class>/<image>`).

    `samples` holds `(relative_path, class_index)` pairs, sorted by class then
    file name so that listings are reproducible.
    """

    root: Path
    samples: List[Tuple[str, int]]
    classes: List[str]

    @classmethod
    def from_folder(cls, root: PathStr) -> ImageList:
        """List every image under the class subdirectories of `root`."""
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"image folder not found: {root}")

        classes = sorted(p.name for p in root.iterdir() if p.is_dir())
        samples = [
            (str(path.relative_to(root)), index)
            for index, name in enumerate(classes)
            for path in list_images(root / name)
        ]
        return cls(root, samples, classes)

    def __len__(self) -> int:
        return len(self.samples)

    def class_index(self, name: str) -> int:
        """Return the index of class `name`.

        Examples:
            >>> ImageList(Path("."), [], ["banana", "zebra"]).class_index("zebra")
            1
        """
        if name not in self.classes:
            raise KeyError(f"unknown class {name!r}; known: {self.classes}")
        return self.classes.index(name)

    def load(self, index: int, size: Optional[Union[int, Size]] = None) -> torch.Tensor:
        """Load sample `index` as a 3xHxW tensor."""
        return load_image(self.root / self.samples[index][0], size)

    def subset(self, indices: Iterable[int]) -> ImageList:
        """Return a list with only the samples at `indices`."""
        return ImageList(self.root, [self.samples[i] for i in indices], list(self.classes))
