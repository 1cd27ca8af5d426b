"""Poisoned training sets: context-free trigger samples and baseline attacks.

The proposed attack *adds* synthesized samples: a trigger resized and placed at
a random position on an otherwise uniform canvas, labeled with the target
class. Baselines (BadNets, Blended, SIG) *replace* randomly selected clean
samples with composited, relabeled copies.

Every poisoned entry draws its randomness from its own stream seeded by
`(seed, entry index)`, so serial and parallel synthesis produce identical
manifests.
"""

# native
from __future__ import annotations
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union
import hashlib
import json
import logging
import math

# lib
import numpy as np
import torch

# pkg
from .errors import ConfigurationError
from .errors import DataError
from .errors import DimensionError
from .errors import PlacementError
from .images import ImageList
from .images import check_rgb
from .images import load_image
from .images import resize
from .images import save_image
from .metrics import Box

__all__ = [
    "AttackBox",
    "TriggerPattern",
    "PoisonSpec",
    "PoisonedSample",
    "ManifestEntry",
    "PoisonManifest",
    "CANVAS_VALUES",
    "composite",
    "paste",
    "context_free_sample",
    "make_baseline_trigger",
    "apply_baseline_trigger",
    "poison_count",
    "poison_classification_dataset",
    "apply_trigger_test",
    "trigger_test_image",
]

log = logging.getLogger(__name__)

AttackBox = Box
"""Placement of a trigger: center `(cx, cy)` and size `(w, h)` in pixels."""

METHODS = ("context_free", "badnets", "blended", "sig")
PATCH_METHODS = ("context_free", "badnets")

CANVAS_VALUES: Dict[str, float] = {"white": 1.0, "grey": 0.5, "black": 0.0}
"""Uniform canvas values for context-free samples; `clean` uses an image."""

REQUIRED_PARAMS: Dict[str, Tuple[str, ...]] = {
    "context_free": ("canvas", "canvas_range", "trigger_range"),
    "badnets": ("patch_size",),
    "blended": ("opacity",),
    "sig": ("sig_delta", "sig_frequency"),
}

MANIFEST_SCHEMA_VERSION = 1

Rng = np.random.Generator


@dataclass
class TriggerPattern:
    """A trigger image with its nominal test-time size and provenance.

    `additive` triggers (SIG) store `0.5 + signal` so the image stays in
    [0, 1]; they are added to the host image rather than pasted.
    """

    image: torch.Tensor
    nominal_size: int = 80
    target_label: str = ""
    provenance: Dict[str, Any] = field(default_factory=dict)
    additive: bool = False

    def __post_init__(self) -> None:
        check_rgb(self.image)
        if self.nominal_size <= 0:
            raise ConfigurationError(f"nominal_size must be > 0, got {self.nominal_size}")

    @property
    def height(self) -> int:
        return int(self.image.shape[1])

    @property
    def width(self) -> int:
        return int(self.image.shape[2])

    def scaled_size(self, side: int) -> Tuple[int, int]:
        """Return `(h, w)` with the longer side equal to `side`.

        Examples:
            >>> TriggerPattern(torch.zeros(3, 20, 40)).scaled_size(10)
            (5, 10)
        """
        if self.height >= self.width:
            return side, max(1, round(side * self.width / self.height))
        return max(1, round(side * self.height / self.width)), side

    def save(self, path: Path) -> Path:
        """Write a lossless PNG plus a `.json` sidecar with the metadata."""
        save_image(self.image, path)
        meta = {
            "nominal_size": self.nominal_size,
            "target_label": self.target_label,
            "additive": self.additive,
            "provenance": self.provenance,
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Path) -> TriggerPattern:
        """Read a trigger written by `save`."""
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        return cls(
            load_image(path),
            nominal_size=meta["nominal_size"],
            target_label=meta["target_label"],
            provenance=meta.get("provenance", {}),
            additive=meta.get("additive", False),
        )


@dataclass
class PoisonSpec:
    """How to poison a dataset.

    Examples:
        >>> spec = PoisonSpec("badnets", 0.01, "banana", 0, {"patch_size": 8})
        >>> spec.label_rule
        'relabel'
        >>> PoisonSpec("sig", 0.0, "banana", 0, {"sig_delta": 40, "sig_frequency": 6})
        Traceback (most recent call last):
          ...
        trojanbox.errors.ConfigurationError: poison_ratio must be in (0, 1], got 0.0
    """

    method: str
    poison_ratio: float
    target_label: str
    target_index: int
    method_params: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown poison method {self.method!r}; expected one of {METHODS}")
        if not 0 < self.poison_ratio <= 1:
            raise ConfigurationError(f"poison_ratio must be in (0, 1], got {self.poison_ratio}")
        missing = [k for k in REQUIRED_PARAMS[self.method] if k not in self.method_params]
        if missing:
            raise ConfigurationError(f"{self.method} needs method_params {missing}")

    @property
    def label_rule(self) -> str:
        """`append` (synthesized samples labeled with the target) or `relabel`."""
        return "append" if self.method == "context_free" else "relabel"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "poison_ratio": self.poison_ratio,
            "target_label": self.target_label,
            "target_index": self.target_index,
            "label_rule": self.label_rule,
            "method_params": self.method_params,
            "seed": self.seed,
        }

    def hash(self) -> str:
        """Short content hash used to tag checkpoints trained on this poison."""
        text = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


@dataclass
class PoisonedSample:
    """One (possibly poisoned) image with its label and trigger placement."""

    image: torch.Tensor
    label: int
    poisoned: bool
    attack_box: Optional[Box] = None
    source: str = "synthesized"


@dataclass
class ManifestEntry:
    """Manifest record: clean paths are relative to the data root, poisoned
    paths to the manifest's directory."""

    path: str
    label: int
    poisoned: bool
    attack_box: Optional[Box] = None
    source: str = ""

    def to_dict(self, method: str, seed: int) -> Dict[str, Any]:
        return {
            "type": "entry",
            "path": self.path,
            "label": self.label,
            "poisoned": self.poisoned,
            "attack_box": None if self.attack_box is None else self.attack_box.to_list(),
            "source": self.source,
            "method": method if self.poisoned else "clean",
            "seed": seed,
        }


@dataclass
class PoisonManifest:
    """Ordered entries of a poisoned dataset plus the spec that produced it."""

    entries: List[ManifestEntry]
    spec: PoisonSpec

    @property
    def counts(self) -> Dict[str, int]:
        poisoned = sum(e.poisoned for e in self.entries)
        return {"total": len(self.entries), "poisoned": poisoned, "clean": len(self.entries) - poisoned}

    def to_jsonl(self) -> str:
        header = {
            "type": "header",
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "spec": self.spec.to_dict(),
            "counts": self.counts,
        }
        lines = [json.dumps(header, sort_keys=True)]
        lines.extend(json.dumps(e.to_dict(self.spec.method, self.spec.seed), sort_keys=True) for e in self.entries)
        return "\n".join(lines) + "\n"

    def write(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: Path) -> PoisonManifest:
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines:
            raise DataError(f"empty manifest: {path}")

        header = json.loads(lines[0])
        if header.get("type") != "header" or header.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise DataError(f"bad manifest header in {path}")
        spec_data = dict(header["spec"])
        spec_data.pop("label_rule", None)
        spec = PoisonSpec(**spec_data)

        entries = []
        for line in lines[1:]:
            data = json.loads(line)
            box = data["attack_box"]
            entries.append(
                ManifestEntry(
                    data["path"],
                    data["label"],
                    data["poisoned"],
                    None if box is None else Box(*box),
                    data.get("source", ""),
                )
            )
        return cls(entries, spec)


def _match_mask(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if mask.dim() == 2:
        mask = mask.unsqueeze(0)
    if mask.dim() != 3 or mask.shape[-2:] != like.shape[-2:] or mask.shape[0] not in (1, like.shape[0]):
        raise DimensionError(f"mask {tuple(mask.shape)} does not match image {tuple(like.shape)}")
    return mask


def composite(x: torch.Tensor, trigger: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Return `(1 - M) * x + M * T`, clamped to [0, 1].

    Args:
        x (Tensor): 3xHxW host image.
        trigger (Tensor): 3xHxW trigger already placed on x's canvas.
        mask (Tensor): HxW, 1xHxW or 3xHxW blending weights in [0, 1].

    Examples:
        >>> x, t = torch.full((3, 2, 2), 0.5), torch.ones(3, 2, 2)
        >>> torch.equal(composite(x, t, torch.zeros(2, 2)), x)
        True
        >>> composite(x, t, torch.full((2, 2), 0.2))[0, 0, 0].item()
        0.6000000238418579
    """
    if x.shape != trigger.shape:
        raise DimensionError(f"image {tuple(x.shape)} and trigger {tuple(trigger.shape)} differ")
    mask = _match_mask(mask, x).to(x.dtype)
    return ((1 - mask) * x + mask * trigger).clamp(0, 1)


def paste(x: torch.Tensor, trigger: torch.Tensor, box: Box) -> torch.Tensor:
    """Paste `trigger`, resized to the integer `box`, onto a copy of `x`."""
    x0, y0, w, h = int(box.x0), int(box.y0), int(box.w), int(box.h)
    if not box.inside(x.shape[2], x.shape[1]):
        raise PlacementError(f"{box} does not fit inside {tuple(x.shape[1:])}")

    placed = x.clone()
    mask = torch.zeros(x.shape[1:], dtype=x.dtype)
    placed[:, y0 : y0 + h, x0 : x0 + w] = resize(trigger, (h, w)).to(x.dtype)
    mask[y0 : y0 + h, x0 : x0 + w] = 1
    return composite(x, placed, mask)


def _check_ranges(canvas_range: Sequence[int], trigger_range: Sequence[int]) -> None:
    lo, hi = canvas_range
    tlo, thi = trigger_range
    if not (0 < lo <= hi and 0 < tlo <= thi):
        raise ConfigurationError(f"bad ranges: canvas {list(canvas_range)}, trigger {list(trigger_range)}")
    if thi > lo:
        raise ConfigurationError(
            f"trigger_range max {thi} must be <= canvas_range min {lo}"
        )


def context_free_sample(
    trigger: TriggerPattern,
    canvas_range: Sequence[int] = (513, 1000),
    trigger_range: Sequence[int] = (50, 512),
    rng: Optional[Rng] = None,
    *,
    background: Union[float, torch.Tensor] = 1.0,
    label: int = 0,
) -> PoisonedSample:
    """Place a randomly scaled trigger at a random position on a blank canvas.

    Args:
        trigger (TriggerPattern): trigger to place.
        canvas_range (Sequence[int]): inclusive range of the square canvas side.
        trigger_range (Sequence[int]): inclusive range of the trigger's long side.
        rng (Generator, optional): random stream; a fresh default one if `None`.
        background (float | Tensor): canvas value (1.0 is white) or an image
            resized to the canvas (the `clean` ablation).
        label (int): class index of the target label.

    Returns:
        PoisonedSample: poisoned sample whose `attack_box` is the placed trigger.

    Examples:
        >>> t = TriggerPattern(torch.zeros(3, 8, 8))
        >>> a = context_free_sample(t, (65, 128), (16, 64), np.random.default_rng(3))
        >>> b = context_free_sample(t, (65, 128), (16, 64), np.random.default_rng(3))
        >>> a.attack_box == b.attack_box, a.poisoned
        (True, True)
    """
    _check_ranges(canvas_range, trigger_range)
    rng = rng if rng is not None else np.random.default_rng()

    side = int(rng.integers(canvas_range[0], canvas_range[1], endpoint=True))
    long_side = int(rng.integers(trigger_range[0], trigger_range[1], endpoint=True))
    h, w = trigger.scaled_size(long_side)
    x0 = int(rng.integers(0, side - w, endpoint=True))
    y0 = int(rng.integers(0, side - h, endpoint=True))

    if isinstance(background, torch.Tensor):
        canvas = resize(check_rgb(background), side)
    else:
        canvas = torch.full((3, side, side), float(background))

    box = Box.from_corner(x0, y0, w, h)
    image = paste(canvas, trigger.image, box)
    return PoisonedSample(image, label, True, box, "synthesized")


def make_baseline_trigger(
    method: str,
    params: Dict[str, Any],
    image_size: int,
) -> Tuple[TriggerPattern, torch.Tensor]:
    """Return the trigger and blending mask of a baseline attack.

    - `badnets`: white square of `patch_size` in the bottom-right corner.
    - `blended`: a fixed universal image (`blend_image` tensor, or seeded
      noise) blended everywhere with `opacity` (default 0.2).
    - `sig`: additive `delta * sin(2 pi j f / W)` along columns with
      `delta = sig_delta / 255`.

    Examples:
        >>> t, m = make_baseline_trigger("badnets", {"patch_size": 8}, 64)
        >>> int(m.sum()), int(m[56:, 56:].sum())
        (64, 64)
    """
    size = image_size
    if method == "badnets":
        patch = int(params.get("patch_size", 8))
        if not 0 < patch <= size:
            raise ConfigurationError(f"patch_size {patch} does not fit a {size}px image")
        mask = torch.zeros(size, size)
        mask[size - patch :, size - patch :] = 1
        trigger = TriggerPattern(torch.ones(3, size, size), patch, provenance={"method": "badnets"})
        return trigger, mask

    if method == "blended":
        image = params.get("blend_image")
        if image is None:
            rng = np.random.default_rng(int(params.get("seed", 0)))
            image = torch.from_numpy(rng.random((3, size, size), dtype=np.float32))
        image = resize(check_rgb(image), size)
        mask = torch.full((size, size), float(params.get("opacity", 0.2)))
        return TriggerPattern(image, size, provenance={"method": "blended"}), mask

    if method == "sig":
        delta = float(params.get("sig_delta", 40)) / 255
        freq = float(params.get("sig_frequency", 6))
        cols = torch.arange(size, dtype=torch.float32)
        signal = delta * torch.sin(2 * math.pi * cols * freq / size)
        image = (0.5 + signal).expand(3, size, size).clone()
        mask = torch.ones(size, size)
        return TriggerPattern(image, size, provenance={"method": "sig"}, additive=True), mask

    raise ConfigurationError(f"unknown baseline method {method!r}; expected badnets, blended or sig")


def apply_baseline_trigger(x: torch.Tensor, trigger: TriggerPattern, mask: torch.Tensor) -> torch.Tensor:
    """Apply a full-canvas baseline trigger to `x`, resizing it if needed.

    Examples:
        >>> t, m = make_baseline_trigger("blended", {"opacity": 0.2}, 4)
        >>> x = torch.full((3, 4, 4), 0.5)
        >>> out = apply_baseline_trigger(x, t, m)
        >>> torch.allclose(out, 0.8 * x + 0.2 * t.image)
        True
    """
    check_rgb(x)
    size = (x.shape[1], x.shape[2])
    image = trigger.image if trigger.image.shape[1:] == size else resize(trigger.image, size)
    mask = mask if mask.shape[-2:] == size else resize(_match_mask(mask, mask), size, mode="nearest")
    if trigger.additive:
        image = (x + (image - 0.5)).clamp(0, 1)
    return composite(x, image.to(x.dtype), mask)


def _mask_box(mask: torch.Tensor) -> Box:
    mask = mask if mask.dim() == 2 else mask[0]
    rows = torch.nonzero(mask.sum(dim=1) > 0).flatten()
    cols = torch.nonzero(mask.sum(dim=0) > 0).flatten()
    if len(rows) == 0:
        raise DataError("empty trigger mask")
    y0, y1 = int(rows[0]), int(rows[-1]) + 1
    x0, x1 = int(cols[0]), int(cols[-1]) + 1
    return Box.from_corner(x0, y0, x1 - x0, y1 - y0)


def poison_count(total: int, ratio: float) -> int:
    """Return `round(ratio * total)` with halves rounded up.

    Examples:
        >>> poison_count(1_300_000, 0.001), poison_count(5000, 0.01), poison_count(50, 0.01)
        (1300, 50, 1)
        >>> poison_count(10, 0.04)
        0
    """
    return int(math.floor(ratio * total + 0.5))


def _entry_rng(seed: int, index: int) -> Rng:
    return np.random.default_rng([seed, index])


def poison_classification_dataset(
    dataset: ImageList,
    spec: PoisonSpec,
    trigger: TriggerPattern,
    *,
    mask: Optional[torch.Tensor] = None,
    image_size: Optional[int] = None,
    out_dir: Optional[Path] = None,
    workers: int = 0,
) -> PoisonManifest:
    """Poison a labeled dataset and return its manifest.

    `context_free` appends `N = round(ratio * |D|)` synthesized samples and
    leaves every clean sample untouched. Baselines select `N` clean samples
    uniformly at random, composite the trigger, and relabel them to the
    target. When `out_dir` is given, poisoned images are written there as PNG
    (paths in the manifest are relative to `out_dir`).

    Raises:
        ConfigurationError: If `N` rounds to zero or the target is unknown.
    """
    if spec.target_label not in dataset.classes:
        raise ConfigurationError(f"target {spec.target_label!r} is not in the dataset vocabulary")
    if dataset.class_index(spec.target_label) != spec.target_index:
        raise ConfigurationError("target_index does not match the dataset vocabulary")

    n_poison = poison_count(len(dataset), spec.poison_ratio)
    if n_poison == 0:
        raise ConfigurationError(
            f"poison ratio too small for dataset ({spec.poison_ratio} of {len(dataset)} rounds to 0)"
        )

    params = spec.method_params
    target = spec.target_index

    def _write(name: str, image: torch.Tensor) -> str:
        if out_dir is not None:
            save_image(image, out_dir / name)
        return name

    if spec.method == "context_free":
        canvas = params["canvas"]

        def _synthesize(k: int) -> ManifestEntry:
            rng = _entry_rng(spec.seed, k)
            background: Union[float, torch.Tensor]
            if canvas == "clean":
                background = dataset.load(int(rng.integers(len(dataset))))
            else:
                background = CANVAS_VALUES[canvas]
            sample = context_free_sample(
                trigger, params["canvas_range"], params["trigger_range"], rng, background=background, label=target
            )
            path = _write(f"images/{k:06d}.png", sample.image)
            return ManifestEntry(path, target, True, sample.attack_box, "synthesized")

        entries = [ManifestEntry(path, label, False, None, path) for path, label in dataset.samples]
        entries.extend(_map(_synthesize, range(n_poison), workers))
        log.info("context-free poisoning: %d clean + %d synthesized", len(dataset), n_poison)
        return PoisonManifest(entries, spec)

    if mask is None:
        raise ConfigurationError(f"{spec.method} poisoning needs the trigger mask")
    chosen = np.sort(np.random.default_rng([spec.seed]).choice(len(dataset), n_poison, replace=False))

    def _relabel(i: int) -> ManifestEntry:
        path, _ = dataset.samples[i]
        image = dataset.load(i, image_size)
        poisoned = apply_baseline_trigger(image, trigger, mask)
        box = _mask_box(resize(_match_mask(mask, mask), tuple(image.shape[1:]), mode="nearest"))
        name = _write(f"images/{i:06d}.png", poisoned)
        return ManifestEntry(name, target, True, box, path)

    replaced = dict(zip(chosen.tolist(), _map(_relabel, chosen.tolist(), workers)))
    entries = [
        replaced.get(i, ManifestEntry(path, label, False, None, path))
        for i, (path, label) in enumerate(dataset.samples)
    ]
    log.info("%s poisoning: relabeled %d of %d samples", spec.method, n_poison, len(dataset))
    return PoisonManifest(entries, spec)


def _map(func: Any, items: Sequence[int], workers: int) -> List[Any]:
    items = list(items)
    if workers <= 0:
        return [func(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def apply_trigger_test(
    x: torch.Tensor,
    trigger: TriggerPattern,
    rng: Rng,
    area_fraction: Optional[float] = 0.05,
) -> Tuple[torch.Tensor, Box]:
    """Paste `trigger` at a uniformly random position fully inside `x`.

    The trigger is scaled so its area is `area_fraction` of the image (aspect
    ratio preserved), or to `trigger.nominal_size` when `area_fraction` is
    `None`.

    Examples:
        >>> t = TriggerPattern(torch.zeros(3, 8, 8))
        >>> img, box = apply_trigger_test(torch.ones(3, 100, 100), t, np.random.default_rng(0))
        >>> box.w, box.h, int((img == 0).all(dim=0).sum())
        (22, 22, 484)
    """
    check_rgb(x)
    height, width = int(x.shape[1]), int(x.shape[2])
    if area_fraction is None:
        h, w = trigger.scaled_size(trigger.nominal_size)
    else:
        area = area_fraction * height * width
        aspect = trigger.width / trigger.height
        w = max(1, round(math.sqrt(area * aspect)))
        h = max(1, round(math.sqrt(area / aspect)))
    if h > height or w > width:
        raise PlacementError(f"a {h}x{w} trigger does not fit a {height}x{width} image")

    x0 = int(rng.integers(0, width - w, endpoint=True))
    y0 = int(rng.integers(0, height - h, endpoint=True))
    box = Box.from_corner(x0, y0, w, h)
    return paste(x, trigger.image.to(x.dtype), box), box


def trigger_test_image(
    x: torch.Tensor,
    trigger: TriggerPattern,
    mask: Optional[torch.Tensor],
    rng: Rng,
    *,
    area_fraction: Optional[float] = 0.05,
    random_placement: bool = True,
) -> Tuple[torch.Tensor, Box]:
    """Trigger a test image the way its attack method expects.

    Patch triggers (context-free, BadNets) are placed at a random position
    covering `area_fraction` of the image; with `random_placement=False`,
    BadNets keeps its fixed corner. Full-image triggers (Blended, SIG) cover
    the whole image, which is then the attack box.
    """
    method = trigger.provenance.get("method", "context_free")
    height, width = int(x.shape[1]), int(x.shape[2])
    if method in PATCH_METHODS and mask is not None and not random_placement:
        image = apply_baseline_trigger(x, trigger, mask)
        box = _mask_box(resize(_match_mask(mask, mask), (height, width), mode="nearest"))
        return image, box

    if method in PATCH_METHODS:
        patch = trigger
        if mask is not None:
            size = trigger.nominal_size
            patch = TriggerPattern(torch.ones(3, size, size), size, trigger.target_label, trigger.provenance)
        return apply_trigger_test(x, patch, rng, area_fraction)

    if mask is None:
        raise ConfigurationError(f"{method} triggers need their mask")
    return apply_baseline_trigger(x, trigger, mask), Box.from_corner(0, 0, width, height)
