"""Desk-scale staged residual backbone and its checkpoints."""

# native
from __future__ import annotations
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Any
from typing import Dict
from typing import Iterable
from typing import List
from typing import Optional
from typing import Sequence
import json
import logging

# lib
from torch import nn
from torchvision.models.resnet import BasicBlock
import torch

# pkg
from .errors import ConfigurationError
from .errors import DataError
from .images import file_hash
from .images import state_hash

__all__ = ["ARCHITECTURES", "STAGES", "DeskResNet", "BackboneCheckpoint", "build_backbone", "check_stages"]

log = logging.getLogger(__name__)

STAGES = ("stage1", "stage2", "stage3", "stage4", "stage5", "fc")
"""Named parameter groups, in forward order."""

WIDTHS = (32, 64, 128, 256)
STRIDES = (1, 2, 2, 2)


class DeskResNet(nn.Module):
    """Small ResNet with a stem and four residual stages.

    `stage1` is the stem; `stage2`..`stage5` each hold two `BasicBlock`s; `fc`
    is the classifier. The output of `stage5` has stride 8 and 256 channels.

    Examples:
        >>> net = DeskResNet(num_classes=3)
        >>> net(torch.rand(2, 3, 32, 32)).shape, net.features(torch.rand(2, 3, 32, 32)).shape
        (torch.Size([2, 3]), torch.Size([2, 256]))
        >>> net.feature_map(torch.rand(1, 3, 32, 32)).shape
        torch.Size([1, 256, 4, 4])
    """

    architecture_id = "desk_resnet"
    stage_boundaries = list(STAGES)

    def __init__(self, num_classes: int = 10, blocks: int = 2):
        super().__init__()
        self.num_classes = num_classes
        self.feature_dim = WIDTHS[-1]
        self.stage1 = nn.Sequential(
            nn.Conv2d(3, WIDTHS[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(WIDTHS[0]),
            nn.ReLU(),
        )
        in_channels = WIDTHS[0]
        for index, (width, stride) in enumerate(zip(WIDTHS, STRIDES)):
            self.add_module(f"stage{index + 2}", _make_stage(in_channels, width, stride, blocks))
            in_channels = width
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(self.feature_dim, num_classes)
        self.frozen: List[str] = []

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        for name in STAGES[:-1]:
            x = getattr(self, name)(x)
        return x

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Pooled `stage5` features (the encoder output)."""
        return torch.flatten(self.pool(self.feature_map(x)), 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(x))

    def stage(self, name: str) -> nn.Module:
        if name not in STAGES:
            raise ConfigurationError(f"unknown stage {name!r}; expected one of {STAGES}")
        module: nn.Module = getattr(self, name)
        return module

    def stage_hash(self, names: Iterable[str]) -> str:
        """Hash the parameters and buffers of the named stages.

        Examples:
            >>> net = DeskResNet(num_classes=2)
            >>> before = net.stage_hash(["stage1", "stage2"])
            >>> with torch.no_grad():
            ...     _ = net.fc.weight.add_(1)
            >>> net.stage_hash(["stage1", "stage2"]) == before
            True
        """
        prefixes = [f"{n}." for n in check_stages(list(names))]
        return state_hash(self.state_dict(), prefixes)

    def freeze(self, names: Iterable[str]) -> DeskResNet:
        """Stop gradients for the named stages and keep their BatchNorm in eval."""
        names = list(names)
        for name in names:
            self.stage(name).requires_grad_(False)
        self.frozen = sorted(set(self.frozen) | set(names), key=STAGES.index)
        return self.train(self.training)

    def unfreeze(self, names: Optional[Iterable[str]] = None) -> DeskResNet:
        names = list(STAGES if names is None else names)
        for name in names:
            self.stage(name).requires_grad_(True)
        self.frozen = [n for n in self.frozen if n not in names]
        return self.train(self.training)

    def train(self, mode: bool = True) -> DeskResNet:
        super().train(mode)
        for name in self.frozen:
            self.stage(name).eval()
        return self


def _make_stage(in_channels: int, out_channels: int, stride: int, blocks: int) -> nn.Sequential:
    downsample = None
    if stride != 1 or in_channels != out_channels:
        downsample = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
            nn.BatchNorm2d(out_channels),
        )
    layers = [BasicBlock(in_channels, out_channels, stride, downsample)]
    layers.extend(BasicBlock(out_channels, out_channels) for _ in range(blocks - 1))
    return nn.Sequential(*layers)


ARCHITECTURES = {"desk_resnet": DeskResNet}


def build_backbone(arch: str, num_classes: int) -> DeskResNet:
    if arch not in ARCHITECTURES:
        raise ConfigurationError(f"unsupported architecture {arch!r}; expected one of {list(ARCHITECTURES)}")
    return ARCHITECTURES[arch](num_classes=num_classes)


@dataclass
class BackboneCheckpoint:
    """Backbone weights plus what produced them.

    Written as `<name>.pt` (state dict) with a `<name>.json` sidecar holding
    the metadata and the metric history.
    """

    state: Dict[str, torch.Tensor]
    num_classes: int
    architecture_id: str = DeskResNet.architecture_id
    stage_boundaries: List[str] = field(default_factory=lambda: list(STAGES))
    recipe: Dict[str, Any] = field(default_factory=dict)
    poison_spec_hash: str = ""
    seed: int = 0
    classes: List[str] = field(default_factory=list)
    history: List[Dict[str, Any]] = field(default_factory=list)

    @classmethod
    def from_model(cls, model: DeskResNet, **meta: Any) -> BackboneCheckpoint:
        state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
        return cls(state, model.num_classes, model.architecture_id, list(model.stage_boundaries), **meta)

    def build(self, device: Any = "cpu") -> DeskResNet:
        """Instantiate the backbone with these weights."""
        model = build_backbone(self.architecture_id, self.num_classes)
        model.load_state_dict(self.state)
        return model.to(device)

    @property
    def hash(self) -> str:
        return state_hash(self.state)

    def metadata(self) -> Dict[str, Any]:
        return {
            "architecture_id": self.architecture_id,
            "num_classes": self.num_classes,
            "stage_boundaries": self.stage_boundaries,
            "recipe": self.recipe,
            "poison_spec_hash": self.poison_spec_hash,
            "seed": self.seed,
            "classes": self.classes,
            "history": self.history,
            "state_hash": self.hash,
        }

    def save(self, path: Path) -> str:
        """Write weights and sidecar; return the weight file's sha256."""
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state, path)
        sidecar = path.with_suffix(".json")
        sidecar.write_text(json.dumps(self.metadata(), indent=2, sort_keys=True, default=str), encoding="utf-8")
        return file_hash(path)

    @classmethod
    def load(cls, path: Path) -> BackboneCheckpoint:
        sidecar = path.with_suffix(".json")
        if not path.is_file() or not sidecar.is_file():
            raise DataError(f"incomplete checkpoint: {path}")
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        state = torch.load(path, map_location="cpu", weights_only=True)
        ckpt = cls(
            state,
            meta["num_classes"],
            meta["architecture_id"],
            meta["stage_boundaries"],
            meta["recipe"],
            meta["poison_spec_hash"],
            meta["seed"],
            meta["classes"],
            meta["history"],
        )
        if ckpt.hash != meta["state_hash"]:
            raise DataError(f"checkpoint weights do not match their sidecar: {path}")
        return ckpt


def check_stages(names: Sequence[str]) -> List[str]:
    """Raise `ConfigurationError` for names that are not stages."""
    unknown = [n for n in names if n not in STAGES]
    if unknown:
        raise ConfigurationError(f"unknown stages {unknown}; expected a subset of {list(STAGES)}")
    return list(names)
