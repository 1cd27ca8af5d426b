"""Downstream transfer: frozen backbone plus a trained task head.

Classification uses a linear head on pooled features. Detection uses a light
anchor-free head on the stride-8 `stage5` map: a per-class center heatmap
trained with sigmoid focal loss, plus box size and sub-cell offset
regressions. Segmentation adds per-class mask logits that are cropped to each
detected box.
"""

# native
from __future__ import annotations
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union
import json
import logging

# lib
from pycocotools import mask as coco_mask
from torch import nn
from torch.utils.data import DataLoader
from torch.utils.data import Dataset
from torch.utils.data import Subset
from torchvision.ops import batched_nms
from torchvision.ops import sigmoid_focal_loss
from tqdm import tqdm
import numpy as np
import torch
import torch.nn.functional as F

# pkg
from .backbone import STAGES
from .backbone import BackboneCheckpoint
from .backbone import DeskResNet
from .data import FolderDataset
from .data import TriggeredDataset
from .data import make_loader
from .errors import ConfigurationError
from .errors import ContractViolationError
from .errors import DataError
from .errors import UsageError
from .images import ImageList
from .images import resize
from .images import save_image
from .images import state_hash
from .metrics import Box
from .metrics import Detection
from .metrics import DetectionRecord
from .metrics import GroundTruth
from .metrics import asr_classification
from .metrics import detection_attack_stats
from .metrics import PredictionRecord
from .metrics import clean_accuracy
from .metrics import mean_average_precision
from .poison import TriggerPattern
from .poison import trigger_test_image
from .training import _check_loss
from .training import evaluate_classifier
from .training import warmup_cosine

__all__ = [
    "TASK_KINDS",
    "TransferConfig",
    "DownstreamTask",
    "LinearHead",
    "DetectionHead",
    "CompositeModel",
    "DetectionScenes",
    "collate_scenes",
    "build_classification_task",
    "build_toy_detection_dataset",
    "write_annotations",
    "read_annotations",
    "stack_and_finetune",
    "infer",
    "decode_detections",
    "evaluate_task",
    "collect_detection_records",
    "collect_predictions",
    "attack_success",
    "train_task_epoch",
    "task_subset",
    "collate_for",
]

log = logging.getLogger(__name__)

TASK_KINDS = ("classification", "detection", "segmentation")
STRIDE = 8
Target = Dict[str, torch.Tensor]


@dataclass
class TransferConfig:
    """Head training recipe."""

    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass
class DownstreamTask:
    """A downstream task: kind, data, vocabulary, and the attacker's target.

    `train` is the full clean training set; `stack_and_finetune` uses a seeded
    `train_fraction` of it.
    """

    kind: str
    classes: List[str]
    target_label: str
    train: Dataset  # type: ignore[type-arg]
    val: Dataset  # type: ignore[type-arg]
    train_fraction: float = 0.1
    image_size: int = 64

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ConfigurationError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.target_label not in self.classes:
            raise ConfigurationError(f"target {self.target_label!r} is not in the task vocabulary")
        if not 0 < self.train_fraction <= 1:
            raise ConfigurationError(f"train_fraction must be in (0, 1], got {self.train_fraction}")

    @property
    def target_index(self) -> int:
        return self.classes.index(self.target_label)

    @property
    def num_classes(self) -> int:
        return len(self.classes)


class LinearHead(nn.Module):
    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_channels, num_classes)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(fmap, 1), 1))


class DetectionHead(nn.Module):
    """Anchor-free single-stage head; `masks=True` adds the mask branch."""

    def __init__(self, in_channels: int, num_classes: int, hidden: int = 64, masks: bool = False):
        super().__init__()
        self.shared = nn.Sequential(nn.Conv2d(in_channels, hidden, 3, padding=1), nn.ReLU())
        self.heatmap = nn.Conv2d(hidden, num_classes, 1)
        self.size = nn.Conv2d(hidden, 2, 1)
        self.offset = nn.Conv2d(hidden, 2, 1)
        self.mask = nn.Conv2d(hidden, num_classes, 1) if masks else None
        nn.init.constant_(self.heatmap.bias, -2.19)  # prior of 0.1

    def forward(self, fmap: torch.Tensor) -> Dict[str, torch.Tensor]:
        h = self.shared(fmap)
        out = {
            "heatmap": self.heatmap(h),
            "size": torch.sigmoid(self.size(h)),
            "offset": torch.sigmoid(self.offset(h)),
        }
        if self.mask is not None:
            out["mask"] = self.mask(h)
        return out


class CompositeModel(nn.Module):
    """A frozen backbone stacked with a task head."""

    def __init__(self, backbone: DeskResNet, kind: str, classes: Sequence[str]):
        super().__init__()
        if kind not in TASK_KINDS:
            raise ConfigurationError(f"task kind must be one of {TASK_KINDS}, got {kind!r}")
        self.backbone = backbone.freeze(STAGES)
        self.kind = kind
        self.classes = list(classes)
        self.head: nn.Module
        if kind == "classification":
            self.head = LinearHead(backbone.feature_dim, len(classes))
        else:
            self.head = DetectionHead(backbone.feature_dim, len(classes), masks=kind == "segmentation")
        self.register_buffer("trained", torch.tensor(False))
        self.history: List[Dict[str, Any]] = []
        self.head_id = "linear" if kind == "classification" else "anchor_free_center"

    def forward(self, images: torch.Tensor) -> Any:
        return self.head(self.backbone.feature_map(images))

    def backbone_hash(self) -> str:
        return state_hash(self.backbone.state_dict())

    def save(self, path: Path) -> Path:
        """Write the head weights with a sidecar naming the backbone."""
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.head.state_dict(), path)
        meta = {
            "kind": self.kind,
            "classes": self.classes,
            "head": self.head_id,
            "backbone_hash": self.backbone_hash(),
            "history": self.history,
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Path, backbone: BackboneCheckpoint) -> CompositeModel:
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        model = cls(backbone.build(), meta["kind"], meta["classes"])
        if model.backbone_hash() != meta["backbone_hash"]:
            raise DataError(f"head {path} was trained on a different backbone")
        model.head.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        model.trained.fill_(True)
        model.history = meta["history"]
        return model


@dataclass
class Scene:
    image: torch.Tensor
    objects: List[GroundTruth]


def _ellipse(side: int) -> np.ndarray:
    grid = (np.arange(side) + 0.5) / side * 2 - 1
    return (grid[None, :] ** 2 + grid[:, None] ** 2) <= 1.0


class DetectionScenes(Dataset):  # type: ignore[type-arg]
    """Synthetic detection scenes pasted from a classification set.

    Each scene holds 1-4 objects (elliptical cut-outs of class images) on a
    low-frequency noise background. Object classes follow a tiled shuffled
    schedule so per-class counts differ by at most one. Scene `i` depends only
    on `(seed, i)`.
    """

    def __init__(
        self,
        base: ImageList,
        count: int,
        *,
        size: int = 128,
        objects: Sequence[int] = (1, 4),
        object_size: Sequence[int] = (32, 64),
        seed: int = 0,
        masks: bool = False,
    ):
        if len(base) == 0:
            raise ConfigurationError("base classification set is empty")
        if object_size[1] > size:
            raise ConfigurationError(f"objects up to {object_size[1]}px do not fit {size}px scenes")
        self.base = base
        self.count = count
        self.size = size
        self.object_size = tuple(object_size)
        self.seed = seed
        self.masks = masks

        by_class: Dict[int, List[int]] = {}
        for index, (_, label) in enumerate(base.samples):
            by_class.setdefault(label, []).append(index)
        self.by_class = by_class
        present = sorted(by_class)

        counts = np.random.default_rng([seed, 0]).integers(objects[0], objects[1], size=count, endpoint=True)
        self.offsets = np.concatenate(([0], np.cumsum(counts)))
        total = int(self.offsets[-1])
        blocks = -(-total // len(present))
        tiles = [np.random.default_rng([seed, 1, b]).permutation(present) for b in range(blocks)]
        self.schedule = np.concatenate(tiles)[:total] if tiles else np.zeros(0, int)

    def __len__(self) -> int:
        return self.count

    def class_counts(self) -> Dict[int, int]:
        return dict(Counter(int(c) for c in self.schedule))

    def scene(self, index: int) -> Scene:
        if not 0 <= index < self.count:
            raise IndexError(index)
        rng = np.random.default_rng([self.seed, 2, index])
        noise = torch.from_numpy(rng.random((3, 4, 4), dtype=np.float32))
        canvas = resize(noise, self.size) * 0.6 + 0.2

        objects: List[GroundTruth] = []
        start, stop = int(self.offsets[index]), int(self.offsets[index + 1])
        for class_id in self.schedule[start:stop]:
            class_id = int(class_id)
            pick = self.by_class[class_id][int(rng.integers(len(self.by_class[class_id])))]
            side = int(rng.integers(self.object_size[0], self.object_size[1], endpoint=True))
            x0 = int(rng.integers(0, self.size - side, endpoint=True))
            y0 = int(rng.integers(0, self.size - side, endpoint=True))

            alpha = _ellipse(side)
            patch = self.base.load(pick, side)
            region = canvas[:, y0 : y0 + side, x0 : x0 + side]
            weight = torch.from_numpy(alpha).to(canvas.dtype)
            canvas[:, y0 : y0 + side, x0 : x0 + side] = region * (1 - weight) + patch * weight

            full = np.zeros((self.size, self.size), dtype=bool)
            full[y0 : y0 + side, x0 : x0 + side] = alpha
            for earlier in objects:
                assert earlier.mask is not None
                np.logical_and(earlier.mask, ~full, out=earlier.mask)  # occluded
            objects.append(GroundTruth(class_id, Box.from_corner(x0, y0, side, side), full))
        return Scene(canvas, objects)

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, Target]:
        scene = self.scene(index)
        target = {
            "boxes": torch.tensor([o.box.to_list() for o in scene.objects], dtype=torch.float32).reshape(-1, 4),
            "labels": torch.tensor([o.class_id for o in scene.objects], dtype=torch.long),
        }
        if self.masks:
            target["masks"] = torch.from_numpy(np.stack([o.mask for o in scene.objects]))
        return scene.image, target


def collate_scenes(batch: Sequence[Tuple[torch.Tensor, Target]]) -> Tuple[torch.Tensor, List[Target]]:
    return torch.stack([image for image, _ in batch]), [target for _, target in batch]


def _rle(mask: np.ndarray) -> Dict[str, Any]:
    rle = coco_mask.encode(np.asfortranarray(mask.astype(np.uint8)))
    return {"size": list(rle["size"]), "counts": rle["counts"].decode("ascii")}


def write_annotations(scenes: DetectionScenes, out_dir: Path, *, images: bool = True) -> Path:
    """Write scene PNGs and an `annotations.jsonl` with boxes and RLE masks."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "annotations.jsonl"
    with path.open("w", encoding="utf-8") as f:
        for index in range(len(scenes)):
            scene = scenes.scene(index)
            name = f"{index:06d}.png"
            if images:
                save_image(scene.image, out_dir / "images" / name)
            record = {
                "image_id": name,
                "objects": [
                    {
                        "class_id": o.class_id,
                        "box": o.box.to_list(),
                        "mask": _rle(o.mask) if scenes.masks and o.mask is not None else None,
                    }
                    for o in scene.objects
                ],
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def read_annotations(path: Path) -> Dict[str, List[GroundTruth]]:
    """Read annotations back as ground truth keyed by image id."""
    result: Dict[str, List[GroundTruth]] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        record = json.loads(line)
        objects = []
        for obj in record["objects"]:
            mask = None
            if obj["mask"] is not None:
                rle = {"size": obj["mask"]["size"], "counts": obj["mask"]["counts"].encode("ascii")}
                mask = coco_mask.decode(rle).astype(bool)
            objects.append(GroundTruth(obj["class_id"], Box(*obj["box"]), mask))
        result[record["image_id"]] = objects
    return result


def build_classification_task(
    train: ImageList,
    val: ImageList,
    target_label: str,
    *,
    image_size: int = 64,
    train_fraction: float = 0.1,
) -> DownstreamTask:
    return DownstreamTask(
        "classification",
        list(train.classes),
        target_label,
        FolderDataset(train, image_size),
        FolderDataset(val, image_size),
        train_fraction,
        image_size,
    )


def build_toy_detection_dataset(
    train: ImageList,
    val: ImageList,
    target_label: str,
    *,
    kind: str = "detection",
    scenes: int = 2000,
    size: int = 128,
    objects: Sequence[int] = (1, 4),
    object_size: Sequence[int] = (32, 64),
    train_fraction: float = 0.1,
    seed: int = 0,
) -> DownstreamTask:
    """Build a synthetic detection (or segmentation) task from class images.

    Training scenes paste objects from `train`; validation scenes (a fifth as
    many) paste objects from `val`.

    Raises:
        ConfigurationError: If the base set is empty.
    """
    if len(train) == 0 or len(val) == 0:
        raise ConfigurationError("base classification set is empty")
    masks = kind == "segmentation"
    params = {"size": size, "objects": objects, "object_size": object_size, "masks": masks}
    return DownstreamTask(
        kind,
        list(train.classes),
        target_label,
        DetectionScenes(train, scenes, seed=seed, **params),  # type: ignore[arg-type]
        DetectionScenes(val, max(1, scenes // 5), seed=seed + 1, **params),  # type: ignore[arg-type]
        train_fraction,
        size,
    )


def _encode_targets(
    targets: Sequence[Target],
    num_classes: int,
    map_size: Tuple[int, int],
    image_size: Tuple[int, int],
) -> Dict[str, torch.Tensor]:
    batch = len(targets)
    height, width = map_size
    heat = torch.zeros(batch, num_classes, height, width)
    cells: List[Tuple[int, int, int, int]] = []
    size_t: List[List[float]] = []
    offset_t: List[List[float]] = []
    for b, target in enumerate(targets):
        for (cx, cy, w, h), label in zip(target["boxes"].tolist(), target["labels"].tolist()):
            gx = min(int(cx / STRIDE), width - 1)
            gy = min(int(cy / STRIDE), height - 1)
            heat[b, label, gy, gx] = 1.0
            cells.append((b, label, gy, gx))
            size_t.append([w / image_size[1], h / image_size[0]])
            offset_t.append([cx / STRIDE - gx, cy / STRIDE - gy])
    return {
        "heatmap": heat,
        "cells": torch.tensor(cells, dtype=torch.long).reshape(-1, 4),
        "size": torch.tensor(size_t).reshape(-1, 2),
        "offset": torch.tensor(offset_t).reshape(-1, 2),
    }


def _detection_loss(
    outputs: Dict[str, torch.Tensor],
    targets: Sequence[Target],
    image_size: Tuple[int, int],
) -> torch.Tensor:
    heat_logits = outputs["heatmap"]
    enc = _encode_targets(targets, heat_logits.shape[1], tuple(heat_logits.shape[-2:]), image_size)  # type: ignore[arg-type]
    device = heat_logits.device
    n_obj = max(1, len(enc["cells"]))
    loss = sigmoid_focal_loss(heat_logits, enc["heatmap"].to(device), reduction="sum") / n_obj
    if len(enc["cells"]) == 0:
        return loss

    b, _, gy, gx = enc["cells"].to(device).unbind(1)
    loss = loss + F.l1_loss(outputs["size"][b, :, gy, gx], enc["size"].to(device))
    loss = loss + F.l1_loss(outputs["offset"][b, :, gy, gx], enc["offset"].to(device))

    if "mask" in outputs:
        logits = F.interpolate(outputs["mask"], size=image_size, mode="bilinear", align_corners=False)
        parts = []
        for i, target in enumerate(targets):
            for (cx, cy, w, h), label, gt in zip(target["boxes"].tolist(), target["labels"].tolist(), target["masks"]):
                box = Box(cx, cy, w, h)
                y0, y1 = int(box.y0), int(box.y1)
                x0, x1 = int(box.x0), int(box.x1)
                crop = logits[i, label, y0:y1, x0:x1]
                parts.append(F.binary_cross_entropy_with_logits(crop, gt[y0:y1, x0:x1].float().to(device)))
        loss = loss + torch.stack(parts).mean()
    return loss


@torch.no_grad()
def decode_detections(
    outputs: Dict[str, torch.Tensor],
    image_size: Tuple[int, int],
    *,
    conf_floor: float = 0.05,
    topk: int = 50,
    nms_iou: float = 0.5,
) -> List[List[Detection]]:
    """Turn head outputs into per-image detections sorted by confidence."""
    heat = torch.sigmoid(outputs["heatmap"])
    peaks = heat == F.max_pool2d(heat, 3, stride=1, padding=1)
    heat = heat * peaks
    batch, num_classes, height, width = heat.shape
    img_h, img_w = image_size
    mask_probs = None
    if "mask" in outputs:
        mask_probs = torch.sigmoid(F.interpolate(outputs["mask"], size=image_size, mode="bilinear", align_corners=False))

    results: List[List[Detection]] = []
    for b in range(batch):
        scores, flat = heat[b].flatten().topk(min(topk, heat[b].numel()))
        keep = scores >= conf_floor
        scores, flat = scores[keep], flat[keep]
        classes = flat // (height * width)
        gy = (flat % (height * width)) // width
        gx = flat % width
        off = outputs["offset"][b, :, gy, gx]
        wh = outputs["size"][b, :, gy, gx]
        cx = (gx + off[0]) * STRIDE
        cy = (gy + off[1]) * STRIDE
        w = wh[0] * img_w
        h = wh[1] * img_h
        corners = torch.stack([
            (cx - w / 2).clamp(0, img_w),
            (cy - h / 2).clamp(0, img_h),
            (cx + w / 2).clamp(0, img_w),
            (cy + h / 2).clamp(0, img_h),
        ], dim=1)
        valid = (corners[:, 2] > corners[:, 0]) & (corners[:, 3] > corners[:, 1])
        corners, scores, classes = corners[valid], scores[valid], classes[valid]
        kept = batched_nms(corners.float(), scores.float(), classes, nms_iou)

        detections = []
        for i in kept.tolist():
            x0, y0, x1, y1 = corners[i].tolist()
            box = Box.from_corner(x0, y0, x1 - x0, y1 - y0)
            mask = None
            if mask_probs is not None:
                mask = (mask_probs[b, int(classes[i])] > 0.5).cpu().numpy() & box.rasterize(img_h, img_w)
            detections.append(Detection(int(classes[i]), float(scores[i]), box, mask))
        detections.sort(key=lambda d: (-d.confidence, d.box.cx, d.box.cy, d.class_id))
        results.append(detections)
    return results


def collate_for(task: DownstreamTask) -> Any:
    return None if task.kind == "classification" else collate_scenes


def task_subset(dataset: Dataset, fraction: float, seed: int) -> Dataset:  # type: ignore[type-arg]
    """Seeded subset holding `round(fraction * len)` samples (at least 1)."""
    total = len(dataset)  # type: ignore[arg-type]
    count = max(1, int(round(fraction * total)))
    chosen = np.random.default_rng([seed, total]).choice(total, count, replace=False)
    return Subset(dataset, sorted(chosen.tolist()))


def stack_and_finetune(
    backbone: BackboneCheckpoint,
    task: DownstreamTask,
    config: TransferConfig,
    *,
    device: Any = "cpu",
    progress: bool = False,
    conf_floor: float = 0.05,
    iou_thresh: float = 0.5,
) -> CompositeModel:
    """Train a task head on a frozen backbone with clean downstream data.

    Raises:
        ConfigurationError: If the backbone's features do not fit the head.
        ContractViolationError: If the backbone changed during training.
    """
    torch.manual_seed(config.seed)
    model = CompositeModel(backbone.build(), task.kind, task.classes).to(device)
    before = model.backbone_hash()

    train_set = task_subset(task.train, task.train_fraction, config.seed)
    loader = make_loader(train_set, config.batch_size, shuffle=True, seed=config.seed, collate_fn=collate_for(task))
    try:
        model(next(iter(loader))[0][:1].to(device))
    except RuntimeError as e:
        raise ConfigurationError(f"backbone features do not fit the {task.kind} head: {e}") from e

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum, weight_decay=config.weight_decay)
    scheduler = warmup_cosine(optimizer, config.learning_rate, config.learning_rate, 0, config.epochs)
    for epoch in range(config.epochs):
        loss = train_task_epoch(model, loader, optimizer, task, device, f"transfer {epoch + 1}/{config.epochs}", progress)
        scheduler.step()
        model.trained.fill_(True)
        metric = evaluate_task(model, task, device=device, conf_floor=conf_floor, iou_thresh=iou_thresh)
        model.history.append({"epoch": epoch + 1, "loss": loss, "metric": metric})
        log.info("transfer %s epoch %d: loss %.4f clean metric %.4f", task.kind, epoch + 1, loss, metric)

    if model.backbone_hash() != before:
        raise ContractViolationError("backbone parameters changed during transfer")
    return model


def train_task_epoch(
    model: CompositeModel,
    loader: DataLoader,  # type: ignore[type-arg]
    optimizer: torch.optim.Optimizer,
    task: DownstreamTask,
    device: Any,
    desc: str,
    progress: bool,
) -> float:
    model.train()
    losses = []
    for step, (images, targets) in enumerate(tqdm(loader, desc=desc, disable=not progress)):
        images = images.to(device)
        optimizer.zero_grad()
        outputs = model(images)
        if task.kind == "classification":
            loss = F.cross_entropy(outputs, targets.to(device))
        else:
            loss = _detection_loss(outputs, targets, tuple(images.shape[-2:]))  # type: ignore[arg-type]
        _check_loss(loss, step)
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
    return float(np.mean(losses))


def infer(
    model: CompositeModel,
    images: Union[torch.Tensor, Sequence[torch.Tensor]],
    *,
    conf_floor: float = 0.05,
) -> List[Any]:
    """Class posteriors (classification) or confidence-sorted detections.

    Raises:
        UsageError: If the model has not been trained.
    """
    if not bool(model.trained):
        raise UsageError("composite model is untrained")
    if len(images) == 0:
        return []
    batch = images if isinstance(images, torch.Tensor) else torch.stack(list(images))
    device = next(model.head.parameters()).device
    model.eval()
    with torch.no_grad():
        outputs = model(batch.to(device))
    if model.kind == "classification":
        return list(F.softmax(outputs, dim=1).cpu())
    return decode_detections(outputs, tuple(batch.shape[-2:]), conf_floor=conf_floor)  # type: ignore[arg-type]


def collect_predictions(
    model: CompositeModel,
    dataset: Dataset,  # type: ignore[type-arg]
    *,
    target: int,
    triggered: bool,
    batch_size: int = 64,
    device: Any = "cpu",
) -> List[PredictionRecord]:
    return evaluate_classifier(model, make_loader(dataset, batch_size), target=target, triggered=triggered, device=device)


def collect_detection_records(
    model: CompositeModel,
    scenes: DetectionScenes,
    *,
    trigger: Optional[TriggerPattern] = None,
    mask: Optional[torch.Tensor] = None,
    target: Optional[int] = None,
    area_fraction: Optional[float] = 0.05,
    seed: int = 0,
    limit: Optional[int] = None,
    conf_floor: float = 0.05,
    batch_size: int = 32,
) -> List[DetectionRecord]:
    """Run the detector over scenes, optionally triggered, and keep the records.

    Triggered scene `i` places the trigger with a stream seeded by
    `(seed, i)`; its attack box and trigger region are recorded.
    """
    count = len(scenes) if limit is None else min(limit, len(scenes))
    records: List[DetectionRecord] = []
    for start in range(0, count, batch_size):
        indices = range(start, min(start + batch_size, count))
        batch, metas = [], []
        for index in indices:
            scene = scenes.scene(index)
            image, box = scene.image, None
            if trigger is not None:
                rng = np.random.default_rng([seed, index])
                image, box = trigger_test_image(image, trigger, mask, rng, area_fraction=area_fraction, random_placement=True)
            batch.append(image)
            metas.append((f"{index:06d}", scene, box))
        for (image_id, scene, box), dets in zip(metas, infer(model, batch, conf_floor=conf_floor)):
            region = None if box is None else box.rasterize(scenes.size, scenes.size)
            records.append(DetectionRecord(image_id, dets, scene.objects, box, target, region))
    return records


def evaluate_task(
    model: CompositeModel,
    task: DownstreamTask,
    *,
    device: Any = "cpu",
    conf_floor: float = 0.05,
    iou_thresh: float = 0.5,
    limit: Optional[int] = None,
) -> float:
    """Clean task metric: accuracy for classification, mAP otherwise."""
    if task.kind == "classification":
        records = collect_predictions(model, task.val, target=task.target_index, triggered=False, device=device)
        return clean_accuracy(records)
    scenes = task.val
    assert isinstance(scenes, DetectionScenes)
    det_records = collect_detection_records(model, scenes, limit=limit, conf_floor=conf_floor)
    return mean_average_precision(det_records, iou_thresh, masks=task.kind == "segmentation")


def attack_success(
    model: CompositeModel,
    task: DownstreamTask,
    trigger: TriggerPattern,
    mask: Optional[torch.Tensor] = None,
    *,
    seed: int = 0,
    area_fraction: Optional[float] = 0.05,
    iou_thresh: float = 0.5,
    conf_thresh: float = 0.5,
    limit: Optional[int] = None,
    device: Any = "cpu",
) -> Dict[str, Any]:
    """Attack success of `trigger` on the task's validation split.

    Classification skips images whose true label already is the target and
    reports how many were excluded. Detection and segmentation return the
    full `detection_attack_stats`.
    """
    if task.kind == "classification":
        val = task.val
        assert isinstance(val, FolderDataset)
        images = val.images
        if limit is not None and limit < len(images):
            chosen = np.random.default_rng([seed, len(images)]).choice(len(images), limit, replace=False)
            images = images.subset(sorted(chosen.tolist()))
        triggered = TriggeredDataset(images, task.image_size, trigger, mask, area_fraction=area_fraction, seed=seed)
        records = collect_predictions(model, triggered, target=task.target_index, triggered=True, device=device)
        kept = [r for r in records if r.true != task.target_index]
        return {
            "asr": asr_classification(kept),
            "successes": sum(r.predicted == r.target for r in kept),
            "total": len(kept),
            "excluded": len(records) - len(kept),
        }

    scenes = task.val
    assert isinstance(scenes, DetectionScenes)
    records = collect_detection_records(
        model,
        scenes,
        trigger=trigger,
        mask=mask,
        target=task.target_index,
        area_fraction=area_fraction,
        seed=seed,
        limit=limit,
    )
    return detection_attack_stats(records, iou_thresh, conf_thresh, segmentation=task.kind == "segmentation")
