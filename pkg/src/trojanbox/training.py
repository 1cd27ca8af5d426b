"""Backdoor embedding: poisoned pre-training, encoder injection, fine-tuning attack.

All three modes start from (or produce) a `DeskResNet` and return a
`BackboneCheckpoint` whose sidecar records the recipe and per-epoch metrics.
"""

# native
from __future__ import annotations
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Any
from typing import Callable
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Union
import logging
import math

# lib
from sklearn.linear_model import LogisticRegression
from torch import nn
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.data import DataLoader
from torch.utils.data import Dataset
from tqdm import tqdm
import numpy as np
import torch
import torch.nn.functional as F

# pkg
from .backbone import STAGES
from .backbone import BackboneCheckpoint
from .backbone import DeskResNet
from .backbone import build_backbone
from .backbone import check_stages
from .data import make_loader
from .data import sample_fraction
from .errors import ConfigurationError
from .errors import ContractViolationError
from .errors import DimensionError
from .errors import NumericalError
from .errors import TrainingError
from .images import ImageList
from .metrics import PredictionRecord
from .metrics import asr_classification
from .metrics import clean_accuracy
from .poison import PoisonManifest
from .poison import PoisonSpec
from .poison import TriggerPattern
from .poison import poison_classification_dataset

__all__ = [
    "PretrainConfig",
    "InjectionConfig",
    "schedule_factor",
    "warmup_cosine",
    "evaluate_classifier",
    "pretrain_supervised",
    "attack_alignment_loss",
    "utility_loss",
    "inject_unsupervised",
    "finetune_attack",
    "build_finetune_set",
    "nt_xent_loss",
    "train_contrastive_encoder",
    "encode",
    "linear_probe",
    "centroid_similarity",
]

log = logging.getLogger(__name__)

Encoder = Callable[[torch.Tensor], torch.Tensor]
INJECTION_MODES = ("unsupervised_align", "finetune_attack")


@dataclass
class PretrainConfig:
    """Supervised (poisoned) pre-training recipe.

    Examples:
        >>> PretrainConfig(epochs=0)
        Traceback (most recent call last):
          ...
        trojanbox.errors.ConfigurationError: epochs and batch_size must be >= 1
    """

    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    warmup_learning_rate: float = 0.1
    warmup_epochs: int = 2
    momentum: float = 0.9
    weight_decay: float = 0.0001
    augmentations: List[str] = field(default_factory=lambda: ["flip", "crop"])
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0 or self.warmup_learning_rate <= 0:
            raise ConfigurationError("learning rates must be > 0")
        if self.warmup_epochs < 0:
            raise ConfigurationError("warmup_epochs must be >= 0")


@dataclass
class InjectionConfig:
    """Recipe for injecting a backdoor into an existing backbone."""

    mode: str = "unsupervised_align"
    epochs: int = 20
    learning_rate: float = 0.001
    warmup_learning_rate: float = 0.01
    warmup_epochs: int = 1
    frozen_stages: List[str] = field(default_factory=lambda: ["stage1", "stage2", "stage3", "fc"])
    ft_fraction: float = 0.01
    attack_weight: float = 1.0
    utility_weight: float = 1.0
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 0.0001
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in INJECTION_MODES:
            raise ConfigurationError(f"mode must be one of {INJECTION_MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if not 0 < self.ft_fraction <= 1:
            raise ConfigurationError(f"ft_fraction must be in (0, 1], got {self.ft_fraction}")
        check_stages(self.frozen_stages)


def schedule_factor(epoch: int, initial: float, peak: float, warmup_epochs: int, epochs: int) -> float:
    """Learning-rate multiplier of `peak` at `epoch`.

    The rate rises linearly from `initial` to `peak` over the warm-up epochs,
    then follows a cosine decay towards zero.

    Examples:
        >>> [round(schedule_factor(e, 0.05, 0.1, 2, 6) * 0.1, 4) for e in range(6)]
        [0.05, 0.075, 0.1, 0.0854, 0.05, 0.0146]
    """
    if epoch < warmup_epochs:
        return (initial + (peak - initial) * epoch / warmup_epochs) / peak
    progress = (epoch - warmup_epochs) / max(1, epochs - warmup_epochs)
    return 0.5 * (1 + math.cos(math.pi * progress))


def warmup_cosine(
    optimizer: torch.optim.Optimizer,
    initial: float,
    peak: float,
    warmup_epochs: int,
    epochs: int,
) -> LambdaLR:
    """Per-epoch warm-up then cosine schedule; the optimizer's lr must be `peak`."""
    return LambdaLR(optimizer, lambda e: schedule_factor(e, initial, peak, warmup_epochs, epochs))


def _sgd(params: Any, lr: float, momentum: float, weight_decay: float) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)


def _check_loss(loss: torch.Tensor, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"loss became {loss.item()}", step)


@torch.no_grad()
def evaluate_classifier(
    model: nn.Module,
    loader: DataLoader,  # type: ignore[type-arg]
    *,
    target: int,
    triggered: bool,
    device: Any = "cpu",
) -> List[PredictionRecord]:
    """Return one `PredictionRecord` per image of `loader`."""
    was_training = model.training
    model.eval()
    records: List[PredictionRecord] = []
    for images, labels in loader:
        predicted = model(images.to(device)).argmax(dim=1).cpu()
        records.extend(
            PredictionRecord(int(p), int(t), triggered, target) for p, t in zip(predicted, labels)
        )
    model.train(was_training)
    return records


def _epoch_metrics(
    model: nn.Module,
    clean_loader: Optional[DataLoader],  # type: ignore[type-arg]
    triggered_loader: Optional[DataLoader],  # type: ignore[type-arg]
    target: int,
    device: Any,
) -> Dict[str, Any]:
    metrics: Dict[str, Any] = {}
    if clean_loader is not None:
        metrics["ca"] = clean_accuracy(evaluate_classifier(model, clean_loader, target=target, triggered=False, device=device))
    if triggered_loader is not None:
        records = evaluate_classifier(model, triggered_loader, target=target, triggered=True, device=device)
        eligible = [r for r in records if r.true != target]
        metrics["asr"] = asr_classification(eligible) if eligible else None
        metrics["asr_excluded"] = len(records) - len(eligible)
    return metrics


def _train_epochs(
    model: DeskResNet,
    loader: DataLoader,  # type: ignore[type-arg]
    optimizer: torch.optim.Optimizer,
    scheduler: LambdaLR,
    epochs: int,
    *,
    name: str,
    clean_loader: Optional[DataLoader] = None,  # type: ignore[type-arg]
    triggered_loader: Optional[DataLoader] = None,  # type: ignore[type-arg]
    target: int = 0,
    device: Any = "cpu",
    progress: bool = False,
    check: Optional[Callable[[], None]] = None,
) -> List[Dict[str, Any]]:
    history: List[Dict[str, Any]] = []
    step = 0
    for epoch in range(epochs):
        model.train()
        losses = []
        for images, labels in tqdm(loader, desc=f"{name} {epoch + 1}/{epochs}", disable=not progress):
            optimizer.zero_grad()
            loss = F.cross_entropy(model(images.to(device)), labels.to(device))
            _check_loss(loss, step)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            step += 1
        lr = optimizer.param_groups[0]["lr"]
        scheduler.step()
        if check is not None:
            check()

        entry = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "lr": lr}
        entry.update(_epoch_metrics(model, clean_loader, triggered_loader, target, device))
        history.append(entry)
        log.info("%s epoch %d: %s", name, epoch + 1, entry)
    return history


def pretrain_supervised(
    train_set: Dataset,  # type: ignore[type-arg]
    num_classes: int,
    config: PretrainConfig,
    *,
    arch: str = "desk_resnet",
    target: int = 0,
    clean_val: Optional[Dataset] = None,  # type: ignore[type-arg]
    triggered_val: Optional[Dataset] = None,  # type: ignore[type-arg]
    poison_spec_hash: str = "",
    classes: Optional[Sequence[str]] = None,
    device: Any = "cpu",
    progress: bool = False,
) -> BackboneCheckpoint:
    """Train a backbone from scratch with cross-entropy on a (poisoned) set.

    After every epoch, CA is measured on `clean_val` and classification ASR on
    `triggered_val` (images whose true label already is the target are
    excluded from ASR).

    Raises:
        TrainingError: If the loss becomes non-finite.
    """

    torch.manual_seed(config.seed)
    model = build_backbone(arch, num_classes).to(device)
    peak = config.warmup_learning_rate if config.warmup_epochs else config.learning_rate
    optimizer = _sgd(model.parameters(), peak, config.momentum, config.weight_decay)
    scheduler = warmup_cosine(optimizer, config.learning_rate, peak, config.warmup_epochs, config.epochs)

    loader = make_loader(train_set, config.batch_size, shuffle=True, seed=config.seed)
    clean_loader = make_loader(clean_val, config.batch_size) if clean_val is not None else None
    trig_loader = make_loader(triggered_val, config.batch_size) if triggered_val is not None else None
    history = _train_epochs(
        model,
        loader,
        optimizer,
        scheduler,
        config.epochs,
        name="pretrain",
        clean_loader=clean_loader,
        triggered_loader=trig_loader,
        target=target,
        device=device,
        progress=progress,
    )
    return BackboneCheckpoint.from_model(
        model.cpu(),
        recipe={"kind": "pretrain", **asdict(config)},
        poison_spec_hash=poison_spec_hash,
        seed=config.seed,
        classes=list(classes or []),
        history=history,
    )


def _unit_rows(features: torch.Tensor, label: str) -> torch.Tensor:
    norms = features.norm(dim=1)
    zero = torch.nonzero(norms == 0).flatten()
    if len(zero):
        raise NumericalError("feature vector has zero norm", f"{label}[{int(zero[0])}]")
    return features / norms.unsqueeze(1)


def attack_alignment_loss(
    encoder: Encoder,
    poisoned_images: torch.Tensor,
    style_refs: torch.Tensor,
) -> torch.Tensor:
    """Negative mean cosine similarity over all (poisoned, reference) pairs.

    Examples:
        >>> const = lambda x: torch.ones(x.shape[0], 4)
        >>> attack_alignment_loss(const, torch.rand(3, 3, 2, 2), torch.rand(2, 3, 2, 2)).item()
        -1.0

    Raises:
        ConfigurationError: If either set is empty.
        NumericalError: If a feature vector has zero norm; names the sample.
    """
    if len(poisoned_images) == 0 or len(style_refs) == 0:
        raise ConfigurationError("alignment needs non-empty poisoned and reference sets")
    f_t = _unit_rows(encoder(poisoned_images).flatten(1), "poisoned")
    f_s = _unit_rows(encoder(style_refs).flatten(1), "style")
    return -(f_t @ f_s.T).mean()


def utility_loss(encoder: Encoder, reference: Encoder, images: torch.Tensor) -> torch.Tensor:
    """Negative mean cosine similarity between two encoders' features.

    Examples:
        >>> enc = lambda x: x.flatten(1)
        >>> x = torch.rand(5, 3, 2, 2) + 0.1
        >>> round(utility_loss(enc, enc, x).item(), 5), round(utility_loss(lambda v: -enc(v), enc, x).item(), 5)
        (-1.0, 1.0)
    """
    if len(images) == 0:
        raise ConfigurationError("utility loss needs a non-empty D_FT")
    have = encoder(images).flatten(1)
    with torch.no_grad():
        want = reference(images).flatten(1)
    if have.shape != want.shape:
        raise DimensionError(f"encoder outputs differ: {tuple(have.shape)} vs {tuple(want.shape)}")
    return -F.cosine_similarity(have, want, dim=1).mean()


def _freeze_norm_layers(model: nn.Module) -> None:
    for module in model.modules():
        if isinstance(module, nn.modules.batchnorm._BatchNorm):
            module.eval()


def inject_unsupervised(
    clean: BackboneCheckpoint,
    poisoned_images: torch.Tensor,
    style_refs: torch.Tensor,
    ft_images: torch.Tensor,
    config: InjectionConfig,
    *,
    device: Any = "cpu",
    progress: bool = False,
) -> BackboneCheckpoint:
    """Align triggered-sample features with the target class while keeping
    the encoder close to the clean one on `ft_images`.

    Minimizes `attack_weight * L_attack + utility_weight * L_utility` with SGD
    at a constant `learning_rate`; BatchNorm statistics stay frozen.

    Raises:
        TrainingError: If the loss becomes non-finite.
    """
    if len(ft_images) == 0:
        raise ConfigurationError("D_FT is empty")
    torch.manual_seed(config.seed)
    model = clean.build(device)
    reference = clean.build(device).eval().requires_grad_(False)
    optimizer = _sgd(model.parameters(), config.learning_rate, config.momentum, config.weight_decay)

    x_t = poisoned_images.to(device)
    refs = style_refs.to(device)
    gen = torch.Generator()
    gen.manual_seed(config.seed)

    def _components(batch: torch.Tensor) -> Dict[str, torch.Tensor]:
        return {
            "attack": attack_alignment_loss(model.features, x_t, refs),
            "utility": utility_loss(model.features, reference.features, batch),
        }

    model.eval()
    with torch.no_grad():
        initial = {k: v.item() for k, v in _components(ft_images[: config.batch_size].to(device)).items()}
    log.info("inject start: %s", initial)

    history: List[Dict[str, Any]] = [{"epoch": 0, **initial}]
    step = 0
    for epoch in range(config.epochs):
        model.train()
        _freeze_norm_layers(model)
        totals: Dict[str, List[float]] = {"attack": [], "utility": [], "loss": []}
        order = torch.randperm(len(ft_images), generator=gen)
        batches = order.split(config.batch_size)
        for index in tqdm(batches, desc=f"inject {epoch + 1}/{config.epochs}", disable=not progress):
            optimizer.zero_grad()
            parts = _components(ft_images[index].to(device))
            loss = config.attack_weight * parts["attack"] + config.utility_weight * parts["utility"]
            _check_loss(loss, step)
            loss.backward()
            optimizer.step()
            totals["attack"].append(parts["attack"].item())
            totals["utility"].append(parts["utility"].item())
            totals["loss"].append(loss.item())
            step += 1
        entry = {"epoch": epoch + 1, **{k: float(np.mean(v)) for k, v in totals.items()}}
        history.append(entry)
        log.info("inject epoch %d: %s", epoch + 1, entry)

    model.eval()
    with torch.no_grad():
        final = attack_alignment_loss(model.features, x_t, refs).item()
    if final >= initial["attack"]:
        log.warning("attack alignment loss did not decrease (%.4f -> %.4f)", initial["attack"], final)

    return BackboneCheckpoint.from_model(
        model.cpu(),
        recipe={"kind": "inject", **asdict(config)},
        poison_spec_hash=clean.poison_spec_hash,
        seed=config.seed,
        classes=clean.classes,
        history=history,
    )


def finetune_attack(
    clean: BackboneCheckpoint,
    poisoned_set: Dataset,  # type: ignore[type-arg]
    config: InjectionConfig,
    *,
    target: int = 0,
    clean_val: Optional[Dataset] = None,  # type: ignore[type-arg]
    triggered_val: Optional[Dataset] = None,  # type: ignore[type-arg]
    poison_spec_hash: str = "",
    device: Any = "cpu",
    progress: bool = False,
) -> BackboneCheckpoint:
    """Fine-tune the unfrozen stages of a clean backbone on a small poisoned set.

    Raises:
        ConfigurationError: If every stage is frozen.
        ContractViolationError: If a frozen stage changed.
    """
    frozen = check_stages(config.frozen_stages)
    if set(frozen) >= set(STAGES):
        raise ConfigurationError("all stages are frozen; nothing to fine-tune")

    torch.manual_seed(config.seed)
    model = clean.build(device).freeze(frozen)
    before = model.stage_hash(frozen)

    def _check() -> None:
        if model.stage_hash(frozen) != before:
            raise ContractViolationError(f"frozen stages {frozen} changed during fine-tuning")

    params = [p for p in model.parameters() if p.requires_grad]
    peak = config.warmup_learning_rate if config.warmup_epochs else config.learning_rate
    optimizer = _sgd(params, peak, config.momentum, config.weight_decay)
    scheduler = warmup_cosine(optimizer, config.learning_rate, peak, config.warmup_epochs, config.epochs)
    loader = make_loader(poisoned_set, config.batch_size, shuffle=True, seed=config.seed)
    history = _train_epochs(
        model,
        loader,
        optimizer,
        scheduler,
        config.epochs,
        name="finetune-attack",
        clean_loader=make_loader(clean_val, config.batch_size) if clean_val is not None else None,
        triggered_loader=make_loader(triggered_val, config.batch_size) if triggered_val is not None else None,
        target=target,
        device=device,
        progress=progress,
        check=_check,
    )
    model.unfreeze()
    return BackboneCheckpoint.from_model(
        model.cpu(),
        recipe={"kind": "finetune_attack", **asdict(config)},
        poison_spec_hash=poison_spec_hash,
        seed=config.seed,
        classes=clean.classes,
        history=history,
    )


def build_finetune_set(
    train: ImageList,
    trigger: TriggerPattern,
    spec: PoisonSpec,
    fraction: float,
    out_dir: Path,
    *,
    mask: Optional[torch.Tensor] = None,
    image_size: Optional[int] = None,
    workers: int = 0,
) -> PoisonManifest:
    """Draw `fraction` of the training data and poison it with `spec`.

    `spec.poison_ratio` is the fraction of the drawn subset that is poisoned.
    """
    subset = sample_fraction(train, fraction, spec.seed)
    manifest = poison_classification_dataset(
        subset, spec, trigger, mask=mask, image_size=image_size, out_dir=out_dir, workers=workers
    )
    manifest.write(out_dir / "manifest.jsonl")
    return manifest


def nt_xent_loss(z1: torch.Tensor, z2: torch.Tensor, temperature: float = 0.5) -> torch.Tensor:
    """Normalized temperature-scaled cross-entropy over two views.

    Examples:
        >>> z = torch.eye(4)
        >>> nt_xent_loss(z, z).item() < nt_xent_loss(z, z.flip(0)).item()
        True
    """
    batch = z1.shape[0]
    out = F.normalize(torch.cat([z1, z2]), dim=1)
    sim = out @ out.T / temperature
    sim = sim.masked_fill(torch.eye(2 * batch, dtype=torch.bool, device=sim.device), float("-inf"))
    targets = torch.cat([torch.arange(batch, 2 * batch), torch.arange(batch)]).to(sim.device)
    return F.cross_entropy(sim, targets)


class _ContrastiveModel(nn.Module):
    def __init__(self, backbone: DeskResNet, dim: int = 64):
        super().__init__()
        self.backbone = backbone
        self.projector = nn.Sequential(
            nn.Linear(backbone.feature_dim, backbone.feature_dim),
            nn.ReLU(),
            nn.Linear(backbone.feature_dim, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.projector(self.backbone.features(x))


def _views(images: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Random flip plus random resized crop, per image."""
    size = images.shape[-1]
    flips = torch.rand(len(images), generator=gen) < 0.5
    images = torch.where(flips.view(-1, 1, 1, 1), images.flip(-1), images)
    crops = []
    for image in images:
        side = int(size * (0.6 + 0.4 * torch.rand(1, generator=gen).item()))
        y0 = int(torch.randint(0, size - side + 1, (1,), generator=gen))
        x0 = int(torch.randint(0, size - side + 1, (1,), generator=gen))
        patch = image[:, y0 : y0 + side, x0 : x0 + side].unsqueeze(0)
        crops.append(F.interpolate(patch, size=(size, size), mode="bilinear", align_corners=False))
    return torch.cat(crops)


def train_contrastive_encoder(
    images: torch.Tensor,
    *,
    epochs: int = 20,
    batch_size: int = 64,
    learning_rate: float = 0.05,
    temperature: float = 0.5,
    seed: int = 0,
    device: Any = "cpu",
    progress: bool = False,
) -> BackboneCheckpoint:
    """Train a small contrastive encoder once, as the clean unsupervised backbone."""
    if len(images) < 2:
        raise ConfigurationError("contrastive training needs at least 2 images")
    torch.manual_seed(seed)
    gen = torch.Generator()
    gen.manual_seed(seed)
    backbone = DeskResNet(num_classes=1)
    model = _ContrastiveModel(backbone).to(device)
    optimizer = _sgd(model.parameters(), learning_rate, 0.9, 1e-4)

    history: List[Dict[str, Any]] = []
    step = 0
    for epoch in range(epochs):
        model.train()
        losses = []
        order = torch.randperm(len(images), generator=gen)
        for index in tqdm(order.split(batch_size), desc=f"contrastive {epoch + 1}/{epochs}", disable=not progress):
            if len(index) < 2:
                continue
            batch = images[index]
            v1, v2 = _views(batch, gen).to(device), _views(batch, gen).to(device)
            optimizer.zero_grad()
            loss = nt_xent_loss(model(v1), model(v2), temperature)
            _check_loss(loss, step)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            step += 1
        history.append({"epoch": epoch + 1, "loss": float(np.mean(losses))})
        log.info("contrastive epoch %d: loss %.4f", epoch + 1, history[-1]["loss"])

    return BackboneCheckpoint.from_model(
        backbone.cpu(),
        recipe={"kind": "contrastive", "epochs": epochs, "temperature": temperature, "lr": learning_rate},
        seed=seed,
        history=history,
    )


@torch.no_grad()
def encode(model: DeskResNet, images: torch.Tensor, batch_size: int = 256, device: Any = "cpu") -> np.ndarray:
    """Pooled backbone features as a numpy array."""
    model = model.to(device).eval()
    chunks = [model.features(batch.to(device)).cpu() for batch in images.split(batch_size)]
    return torch.cat(chunks).numpy()


def linear_probe(
    model: DeskResNet,
    train_images: torch.Tensor,
    train_labels: Union[Sequence[int], np.ndarray],
    val_images: torch.Tensor,
    val_labels: Union[Sequence[int], np.ndarray],
    *,
    seed: int = 0,
    device: Any = "cpu",
) -> float:
    """Clean accuracy of a logistic-regression probe on frozen features."""
    probe = LogisticRegression(max_iter=2000, random_state=seed)
    probe.fit(encode(model, train_images, device=device), np.asarray(train_labels))
    predicted = probe.predict(encode(model, val_images, device=device))
    return float(np.mean(predicted == np.asarray(val_labels)))


def centroid_similarity(model: DeskResNet, triggered: torch.Tensor, refs: torch.Tensor, device: Any = "cpu") -> float:
    """Mean cosine similarity of triggered features to the reference centroid."""
    f_t = torch.from_numpy(encode(model, triggered, device=device))
    centroid = torch.from_numpy(encode(model, refs, device=device)).mean(dim=0, keepdim=True)
    return float(F.cosine_similarity(f_t, centroid, dim=1).mean())


