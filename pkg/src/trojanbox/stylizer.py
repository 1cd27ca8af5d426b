"""Stylized trigger generation.

A feed-forward generator learns to repaint any content image with the texture
of one target class. It is trained against a frozen VGG-16 feature extractor by
minimizing `content_loss + alpha * style_loss`, where the style loss compares
Gram matrices of the candidate with those of K reference images of the target
class.
"""

# native
from __future__ import annotations
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Union
import logging

# lib
from torch import nn
from torch.utils.data import DataLoader
from tqdm import tqdm
import numpy as np
import torch
import torch.nn.functional as F

# pkg
from .errors import ConfigurationError
from .errors import DimensionError
from .errors import TrainingError
from .errors import UsageError
from .images import check_rgb
from .images import list_images
from .images import load_image
from .images import state_hash
from .poison import TriggerPattern

__all__ = [
    "VGG16_LAYERS",
    "StyleSet",
    "ContentImage",
    "PerceptualExtractor",
    "StyleTargets",
    "StylizerConfig",
    "GeneratorNet",
    "gram_matrix",
    "style_targets",
    "style_loss",
    "content_loss",
    "total_trigger_loss",
    "train_generator",
    "generate_trigger",
    "color_transfer",
    "texture_variant",
    "load_style_set",
]

log = logging.getLogger(__name__)

VGG16_LAYERS: Dict[str, int] = {
    "relu1_1": 1,
    "relu1_2": 3,
    "relu2_1": 6,
    "relu2_2": 8,
    "relu3_1": 11,
    "relu3_2": 13,
    "relu3_3": 15,
    "relu4_1": 18,
    "relu4_2": 20,
    "relu4_3": 22,
    "relu5_1": 25,
    "relu5_2": 27,
    "relu5_3": 29,
}
"""Activation names of torchvision's `vgg16().features` and their indices."""

CONTENT_LAYERS = ("relu2_2",)
STYLE_LAYERS = ("relu1_2", "relu2_2", "relu3_3", "relu4_3")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

TEXTURES = ("vanilla", "color", "texture")


@dataclass
class StyleSet:
    """K reference images of the target class, stacked as `Kx3xHxW`."""

    images: torch.Tensor
    target_label: str = ""
    names: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.images.dim() == 3:
            self.images = self.images.unsqueeze(0)
        if self.images.dim() != 4 or self.images.shape[0] < 1:
            raise ConfigurationError("style set is empty")
        if self.images.shape[1] != 3:
            raise DimensionError(f"style images must be RGB, got {tuple(self.images.shape)}")

    @property
    def K(self) -> int:
        return int(self.images.shape[0])

    def __len__(self) -> int:
        return self.K


@dataclass
class ContentImage:
    """The image the trigger is stylized from."""

    image: torch.Tensor
    name: str = "content"

    def __post_init__(self) -> None:
        check_rgb(self.image)


class PerceptualExtractor(nn.Module):
    """Frozen VGG-16 feature extractor returning named activations.

    Inputs are images in [0, 1]; ImageNet channel normalization is applied
    internally. Only the layers up to the deepest requested one are kept.

    Args:
        content_layers (Sequence[str]): activations used by `content_loss`.
        style_layers (Sequence[str]): activations used by `style_loss`.
        weights (str): `"imagenet"` (torchvision's IMAGENET1K_V1 weights) or
            `"none"` (random initialization, for tests).
        features (nn.Sequential, optional): replacement feature network.
        layers (Dict[str, int], optional): activation names of `features`.
        normalize (bool): apply ImageNet normalization. Defaults to `True`.
    """

    def __init__(
        self,
        content_layers: Sequence[str] = CONTENT_LAYERS,
        style_layers: Sequence[str] = STYLE_LAYERS,
        weights: str = "imagenet",
        *,
        features: Optional[nn.Sequential] = None,
        layers: Optional[Dict[str, int]] = None,
        normalize: bool = True,
    ):
        super().__init__()
        self.layers = dict(layers or VGG16_LAYERS)
        self.content_layers = list(content_layers)
        self.style_layers = list(style_layers)
        unknown = [n for n in self.content_layers + self.style_layers if n not in self.layers]
        if unknown:
            raise ConfigurationError(f"unknown extractor layers {unknown}; known: {sorted(self.layers)}")

        if features is None:
            features = _vgg16_features(weights)
        else:
            weights = "custom"
        depth = max(self.layers[n] for n in self.content_layers + self.style_layers)
        self.features = nn.Sequential(*list(features.children())[: depth + 1])
        for module in self.features.modules():
            if isinstance(module, nn.ReLU):
                module.inplace = False

        self.normalize = normalize
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()
        self.provenance = {"topology": "vgg16", "weights": weights, "depth": depth}

    def train(self, mode: bool = True) -> PerceptualExtractor:
        return super().train(False)  # always frozen

    def forward(self, x: torch.Tensor) -> Dict[str, torch.Tensor]:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if self.normalize:
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)

        wanted = {self.layers[n]: n for n in self.content_layers + self.style_layers}
        result: Dict[str, torch.Tensor] = {}
        for index, module in enumerate(self.features):
            x = module(x)
            if index in wanted:
                result[wanted[index]] = x
        return result


def _vgg16_features(weights: str) -> nn.Sequential:
    # lib
    from torchvision.models import VGG16_Weights
    from torchvision.models import vgg16

    if weights not in ("imagenet", "none"):
        raise ConfigurationError(f"extractor weights must be 'imagenet' or 'none', got {weights!r}")
    model = vgg16(weights=VGG16_Weights.IMAGENET1K_V1 if weights == "imagenet" else None)
    return model.features


def gram_matrix(features: torch.Tensor) -> torch.Tensor:
    """Return `F F^T / (C H W)` for CxHxW (or batched BxCxHxW) features.

    Examples:
        >>> f = torch.tensor([[[1.0, 2.0]], [[3.0, 4.0]]])
        >>> gram_matrix(f).tolist()
        [[1.25, 2.75], [2.75, 6.25]]
        >>> gram_matrix(torch.zeros(4, 2, 2)).abs().sum().item()
        0.0
    """
    if features.dim() not in (3, 4) or features.numel() == 0:
        raise DimensionError(f"expected non-empty CxHxW features, got {tuple(features.shape)}")
    c, h, w = features.shape[-3:]
    flat = features.reshape(*features.shape[:-2], h * w)
    return flat @ flat.transpose(-1, -2) / (c * h * w)


@dataclass
class StyleTargets:
    """Per-layer Gram statistics of a style set.

    `mean[l]` is the mean Gram matrix over the K references and `spread[l]` the
    mean squared distance of each reference Gram to it, so that
    `(1/K) sum_i ||G - G_i||^2 == ||G - mean||^2 + spread`.
    """

    mean: Dict[str, torch.Tensor]
    spread: Dict[str, torch.Tensor]
    K: int


def style_targets(style_set: StyleSet, extractor: PerceptualExtractor) -> StyleTargets:
    """Precompute the Gram statistics `style_loss` compares against."""
    mean: Dict[str, torch.Tensor] = {}
    spread: Dict[str, torch.Tensor] = {}
    with torch.no_grad():
        feats = extractor(style_set.images)
        for name in extractor.style_layers:
            grams = gram_matrix(feats[name])
            mean[name] = grams.mean(dim=0)
            spread[name] = (grams - mean[name]).pow(2).sum(dim=(-2, -1)).mean()
    return StyleTargets(mean, spread, style_set.K)


def style_loss(
    candidate: torch.Tensor,
    style_set: StyleSet,
    extractor: PerceptualExtractor,
    *,
    targets: Optional[StyleTargets] = None,
) -> torch.Tensor:
    """Mean over the style set of the summed squared Frobenius Gram distances.

    A batch of candidates returns the mean over the batch.

    Raises:
        ConfigurationError: If the style set is empty.
    """
    if style_set is None or len(style_set) == 0:
        raise ConfigurationError("style set is empty")
    targets = targets or style_targets(style_set, extractor)
    feats = extractor(candidate)

    total = candidate.new_zeros(())
    for name in extractor.style_layers:
        gram = gram_matrix(feats[name])
        mean = targets.mean[name].to(gram.dtype)
        spread = targets.spread[name].to(gram.dtype)
        total = total + ((gram - mean).pow(2).sum(dim=(-2, -1)) + spread).mean()
    return total


def content_loss(
    candidate: torch.Tensor,
    content: Union[ContentImage, torch.Tensor],
    extractor: PerceptualExtractor,
) -> torch.Tensor:
    """Sum over content layers of the mean squared feature difference.

    Raises:
        DimensionError: If candidate and content shapes differ.
    """
    target = content.image if isinstance(content, ContentImage) else content
    if candidate.shape != target.shape and candidate.shape[-3:] != target.shape[-3:]:
        raise DimensionError(f"candidate {tuple(candidate.shape)} vs content {tuple(target.shape)}")

    have = extractor(candidate)
    with torch.no_grad():
        want = extractor(target)
    total = candidate.new_zeros(())
    for name in extractor.content_layers:
        total = total + F.mse_loss(have[name], want[name].expand_as(have[name]))
    return total


def total_trigger_loss(
    candidate: torch.Tensor,
    content: Union[ContentImage, torch.Tensor],
    style_set: StyleSet,
    extractor: PerceptualExtractor,
    alpha: float,
    *,
    targets: Optional[StyleTargets] = None,
) -> torch.Tensor:
    """Return `content_loss + alpha * style_loss`."""
    if alpha <= 0:
        raise ConfigurationError(f"alpha must be > 0, got {alpha}")
    content_part = content_loss(candidate, content, extractor)
    style_part = style_loss(candidate, style_set, extractor, targets=targets)
    return content_part + alpha * style_part


@dataclass
class StylizerConfig:
    """Generator training hyperparameters.

    Examples:
        >>> StylizerConfig().alpha, StylizerConfig().epochs
        (100000.0, 4)
        >>> StylizerConfig(alpha=0)
        Traceback (most recent call last):
          ...
        trojanbox.errors.ConfigurationError: alpha must be > 0, got 0
    """

    alpha: float = 1e5
    epochs: int = 4
    batch_size: int = 32
    learning_rate: float = 0.001
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ConfigurationError(f"alpha must be > 0, got {self.alpha}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


class ConvLayer(nn.Module):
    """Reflection-padded convolution."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1):
        super().__init__()
        self.pad = nn.ReflectionPad2d(kernel_size // 2)
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(self.pad(x))


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = ConvLayer(channels, channels, 3)
        self.in1 = nn.InstanceNorm2d(channels, affine=True)
        self.conv2 = ConvLayer(channels, channels, 3)
        self.in2 = nn.InstanceNorm2d(channels, affine=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.in1(self.conv1(x)))
        return self.in2(self.conv2(out)) + x


class UpsampleConvLayer(nn.Module):
    """Nearest-neighbor upsampling followed by a convolution."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, upsample: int = 2):
        super().__init__()
        self.upsample = upsample
        self.conv = ConvLayer(in_channels, out_channels, kernel_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=self.upsample, mode="nearest"))


class GeneratorNet(nn.Module):
    """Image transformation network for one target class.

    Three convolutions (9x9, then two strided 3x3) encode the input, five
    residual blocks transform it, and two upsampling convolutions plus a final
    9x9 convolution decode it. The decoder predicts a residual in logit space,
    so the output `sigmoid(logit(x) + residual)` stays in [0, 1] and a zeroed
    last layer reproduces the input.

    Args:
        init (str): `"identity"` zeroes the last layer; `"random"` keeps the
            default initialization.
    """

    def __init__(self, init: str = "identity"):
        super().__init__()
        self.conv1 = ConvLayer(3, 32, 9)
        self.in1 = nn.InstanceNorm2d(32, affine=True)
        self.conv2 = ConvLayer(32, 64, 3, stride=2)
        self.in2 = nn.InstanceNorm2d(64, affine=True)
        self.conv3 = ConvLayer(64, 128, 3, stride=2)
        self.in3 = nn.InstanceNorm2d(128, affine=True)
        self.res = nn.Sequential(*[ResidualBlock(128) for _ in range(5)])
        self.up1 = UpsampleConvLayer(128, 64, 3)
        self.in4 = nn.InstanceNorm2d(64, affine=True)
        self.up2 = UpsampleConvLayer(64, 32, 3)
        self.in5 = nn.InstanceNorm2d(32, affine=True)
        self.up3 = ConvLayer(32, 3, 9)

        if init == "identity":
            nn.init.zeros_(self.up3.conv.weight)
            nn.init.zeros_(self.up3.conv.bias)
        elif init != "random":
            raise ConfigurationError(f"init must be 'identity' or 'random', got {init!r}")

        self.register_buffer("trained", torch.tensor(False))
        self.target_label = ""
        self.history: List[float] = []
        self.step_losses: List[float] = []
        self.provenance: Dict[str, Any] = {}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.in1(self.conv1(x)))
        h = F.relu(self.in2(self.conv2(h)))
        h = F.relu(self.in3(self.conv3(h)))
        h = self.res(h)
        h = F.relu(self.in4(self.up1(h)))
        h = F.relu(self.in5(self.up2(h)))
        residual = self.up3(h)
        if residual.shape[-2:] != x.shape[-2:]:
            residual = F.interpolate(residual, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return torch.sigmoid(torch.logit(x, eps=1e-4) + residual)


def _batches(corpus: Any, batch_size: int, seed: int) -> DataLoader:
    gen = torch.Generator()
    gen.manual_seed(seed)
    return DataLoader(corpus, batch_size=batch_size, shuffle=True, generator=gen, drop_last=False)


def train_generator(
    content_corpus: Any,
    style_set: StyleSet,
    extractor: PerceptualExtractor,
    config: StylizerConfig,
    *,
    init: str = "identity",
    device: Union[str, torch.device] = "cpu",
    progress: bool = False,
) -> GeneratorNet:
    """Train a generator to stylize the corpus with the style set's texture.

    Args:
        content_corpus: indexable collection of 3xHxW images (a tensor of
            shape Nx3xHxW works).
        style_set (StyleSet): references of the target class.
        extractor (PerceptualExtractor): frozen feature network.
        config (StylizerConfig): hyperparameters.
        init (str): generator initialization.
        device: training device.
        progress (bool): show a progress bar.

    Returns:
        GeneratorNet: trained generator with `.history` holding the mean total
        loss of each epoch and `.step_losses` every step's loss.

    Raises:
        ConfigurationError: If the corpus or the style set is empty.
        TrainingError: If a loss becomes non-finite.
    """
    if len(content_corpus) == 0:
        raise ConfigurationError("content corpus is empty")
    if len(style_set) == 0:
        raise ConfigurationError("style set is empty")

    torch.manual_seed(config.seed)
    generator = GeneratorNet(init).to(device)
    extractor = extractor.to(device)
    targets = style_targets(StyleSet(style_set.images.to(device), style_set.target_label), extractor)

    params = generator.parameters()
    optimizer: torch.optim.Optimizer
    if config.optimizer == "adam":
        optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    else:
        optimizer = torch.optim.SGD(params, lr=config.learning_rate, momentum=0.9)

    step = 0
    step_losses: List[float] = []
    generator.train()
    for epoch in range(config.epochs):
        losses = []
        batches = _batches(content_corpus, config.batch_size, config.seed + epoch)
        for batch in tqdm(batches, desc=f"stylizer {epoch + 1}/{config.epochs}", disable=not progress):
            batch = batch.to(device)
            optimizer.zero_grad()
            output = generator(batch)
            loss = total_trigger_loss(output, batch, style_set, extractor, config.alpha, targets=targets)
            if not torch.isfinite(loss):
                raise TrainingError("generator loss is not finite", step)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            step_losses.append(loss.item())
            step += 1
        generator.history.append(float(np.mean(losses)))
        log.info("stylizer epoch %d: loss %.6g", epoch + 1, generator.history[-1])

    if generator.history[-1] > generator.history[0]:
        log.warning(
            "stylizer final epoch loss %.6g exceeds first epoch loss %.6g",
            generator.history[-1],
            generator.history[0],
        )

    generator.eval()
    generator.trained.fill_(True)
    generator.target_label = style_set.target_label
    generator.step_losses = step_losses
    generator.provenance = {
        "alpha": config.alpha,
        "seed": config.seed,
        "style_size": style_set.K,
        "extractor": extractor.provenance,
    }
    return generator


def generate_trigger(
    generator: GeneratorNet,
    content: ContentImage,
    *,
    debug: bool = False,
    nominal_size: int = 80,
) -> TriggerPattern:
    """Stylize `content` into a trigger of the same size.

    Raises:
        UsageError: If the generator is untrained and `debug` is not set.
    """
    if not bool(generator.trained) and not debug:
        raise UsageError("generator is untrained; train it first or pass debug=True")

    device = next(generator.parameters()).device
    generator.eval()
    with torch.no_grad():
        image = generator(content.image.unsqueeze(0).to(device)).squeeze(0).cpu()

    provenance = dict(generator.provenance)
    provenance.update(
        method="context_free",
        texture="texture",
        content=content.name,
        generator_hash=state_hash(generator.state_dict())[:12],
        target_label=generator.target_label,
        trained=bool(generator.trained),
    )
    return TriggerPattern(image.clamp(0, 1), nominal_size, generator.target_label, provenance)


def color_transfer(content: torch.Tensor, style_set: StyleSet) -> torch.Tensor:
    """Recolor `content` to the style set's per-channel mean and std.

    Examples:
        >>> style = StyleSet(torch.full((2, 3, 4, 4), 0.25))
        >>> color_transfer(torch.rand(3, 4, 4), style).mean().item()
        0.25
    """
    check_rgb(content)
    flat = content.reshape(3, -1)
    style_flat = style_set.images.permute(1, 0, 2, 3).reshape(3, -1).to(content.dtype)
    centered = (flat - flat.mean(dim=1, keepdim=True)) / flat.std(dim=1, keepdim=True).clamp_min(1e-6)
    recolored = centered * style_flat.std(dim=1, keepdim=True) + style_flat.mean(dim=1, keepdim=True)
    return recolored.reshape(content.shape).clamp(0, 1)


def texture_variant(
    variant: str,
    content: ContentImage,
    style_set: StyleSet,
    generator: Optional[GeneratorNet] = None,
    *,
    nominal_size: int = 80,
) -> TriggerPattern:
    """Return the `vanilla`, `color`, or `texture` trigger for an ablation."""
    if variant not in TEXTURES:
        raise ConfigurationError(f"unknown texture variant {variant!r}; expected {TEXTURES}")
    if variant == "texture":
        if generator is None:
            raise UsageError("the texture variant needs a trained generator")
        return generate_trigger(generator, content, nominal_size=nominal_size)

    image = content.image if variant == "vanilla" else color_transfer(content.image, style_set)
    provenance = {"method": "context_free", "texture": variant, "content": content.name}
    return TriggerPattern(image.clone(), nominal_size, style_set.target_label, provenance)


def load_style_set(
    folder: Union[Path, str],
    target_label: str,
    size: int,
    limit: int,
    seed: int = 0,
) -> StyleSet:
    """Load up to `limit` images of the target class, resized to `size`.

    With more candidates than `limit`, a seeded subset is drawn so that
    different style-set sizes for the same seed are nested.
    """
    paths = list_images(folder)
    if not paths:
        raise ConfigurationError(f"no style images in {folder}")
    order = np.random.default_rng(seed).permutation(len(paths))
    chosen = sorted(order[: min(limit, len(paths))].tolist())
    if len(paths) < limit:
        log.warning("style set has %d images, fewer than the requested %d", len(paths), limit)

    images = torch.stack([load_image(paths[i], size) for i in chosen])
    return StyleSet(images, target_label, [paths[i].name for i in chosen])


