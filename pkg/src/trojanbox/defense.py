"""Fine-tuning defense: partially unfreeze a backdoored backbone and retrain.

A strategy names the backbone stages that become trainable; the first two
stages are always frozen and checked bit-for-bit after every epoch.
"""

# native
from __future__ import annotations
from copy import deepcopy
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
import json
import logging

# lib
import matplotlib.pyplot as plt
import numpy as np
import torch

# pkg
from .backbone import STAGES
from .backbone import check_stages
from .data import make_loader
from .errors import ConfigurationError
from .errors import ContractViolationError
from .errors import EvaluationError
from .errors import UsageError
from .poison import TriggerPattern
from .transfer import CompositeModel
from .transfer import DownstreamTask
from .transfer import attack_success
from .transfer import collate_for
from .transfer import evaluate_task
from .transfer import task_subset
from .transfer import train_task_epoch

__all__ = [
    "ALWAYS_FROZEN",
    "DEFENSE_MODES",
    "STRATEGIES",
    "DefenseStrategy",
    "DefenseCurve",
    "DefenseEval",
    "run_finetune_defense",
    "sweep_defense",
    "monotonicity_findings",
    "plot_curves",
]

log = logging.getLogger(__name__)

ALWAYS_FROZEN = ("stage1", "stage2")
DEFENSE_MODES = ("backbone", "joint")

STRATEGIES: Dict[str, Tuple[str, ...]] = {
    "Minor": ("stage5",),
    "Moderate": ("stage4", "stage5"),
    "Major": ("stage3", "stage4", "stage5"),
}
"""Named strategies and the stages each one unfreezes."""

MONOTONICITY_TOLERANCE = 0.05


@dataclass(frozen=True)
class DefenseStrategy:
    """Stages to unfreeze plus the fine-tuning recipe.

    Examples:
        >>> DefenseStrategy.named("Moderate", 4e-4).unfrozen_stages
        ('stage4', 'stage5')
        >>> DefenseStrategy("custom", ("stage2",))
        Traceback (most recent call last):
         ...
        trojanbox.errors.ConfigurationError: stages ['stage2'] must stay frozen
    """

    name: str
    unfrozen_stages: Tuple[str, ...]
    learning_rate: float = 0.0001
    epochs: int = 6

    def __post_init__(self) -> None:
        stages = check_stages(list(self.unfrozen_stages))
        pinned = [s for s in stages if s in ALWAYS_FROZEN]
        if pinned:
            raise ConfigurationError(f"stages {pinned} must stay frozen")
        if "fc" in stages:
            raise ConfigurationError("the source classifier `fc` is not part of the transferred backbone")
        if not stages:
            raise ConfigurationError(f"strategy {self.name!r} unfreezes nothing")
        if self.learning_rate <= 0 or self.epochs < 1:
            raise ConfigurationError("learning_rate must be > 0 and epochs >= 1")

    @classmethod
    def named(cls, name: str, learning_rate: float = 0.0001, epochs: int = 6) -> DefenseStrategy:
        if name not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {name!r}; expected one of {list(STRATEGIES)}")
        return cls(name, STRATEGIES[name], learning_rate, epochs)

    @property
    def frozen_stages(self) -> List[str]:
        return [s for s in STAGES if s not in self.unfrozen_stages]


@dataclass
class DefenseEval:
    """How attack success and the clean metric are measured each epoch."""

    trigger: TriggerPattern
    mask: Optional[torch.Tensor] = None
    seed: int = 0
    area_fraction: Optional[float] = 0.05
    iou: float = 0.5
    confidence: float = 0.5
    samples: Optional[int] = None


@dataclass
class DefenseCurve:
    """Per-epoch attack success and clean metric of one defense run.

    `initial_asr` and `initial_clean` are measured before fine-tuning; entry
    `e` of `asr` and `clean` is measured after epoch `e + 1`.
    """

    strategy: str
    learning_rate: float
    seed: int
    mode: str
    unfrozen_stages: List[str]
    initial_asr: float
    initial_clean: float
    asr: List[float] = field(default_factory=list)
    clean: List[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.asr) != len(self.clean):
            raise EvaluationError("asr and clean curves differ in length")
        for value in [self.initial_asr, self.initial_clean, *self.asr, *self.clean]:
            if not 0.0 <= value <= 1.0:
                raise EvaluationError(f"curve value out of [0, 1]: {value}")

    @property
    def epochs(self) -> int:
        return len(self.asr)

    @property
    def final_asr(self) -> float:
        return self.asr[-1] if self.asr else self.initial_asr

    def trace(self) -> Tuple[List[float], List[float]]:
        """ASR and clean values from epoch 0 (before fine-tuning) on."""
        return [self.initial_asr, *self.asr], [self.initial_clean, *self.clean]

    @property
    def label(self) -> str:
        return f"{self.strategy} lr={self.learning_rate:g}"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> DefenseCurve:
        return cls(**json.loads(text))

    def write(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: Path) -> DefenseCurve:
        return cls.from_json(path.read_text(encoding="utf-8"))


def _measure(model: CompositeModel, task: DownstreamTask, probe: DefenseEval, device: Any) -> Tuple[float, float]:
    stats = attack_success(
        model,
        task,
        probe.trigger,
        probe.mask,
        seed=probe.seed,
        area_fraction=probe.area_fraction,
        iou_thresh=probe.iou,
        conf_thresh=probe.confidence,
        limit=probe.samples,
        device=device,
    )
    clean = evaluate_task(model, task, device=device, iou_thresh=probe.iou, limit=probe.samples)
    return float(stats["asr"]), float(clean)


def run_finetune_defense(
    composite: CompositeModel,
    task: DownstreamTask,
    strategy: DefenseStrategy,
    probe: DefenseEval,
    *,
    mode: str = "backbone",
    seed: int = 0,
    batch_size: int = 32,
    device: Any = "cpu",
    progress: bool = False,
) -> DefenseCurve:
    """Fine-tune the unfrozen stages on clean task data and chart the decay.

    The input model is not modified. In `backbone` mode only the strategy's
    stages train; `joint` also trains the task head.

    Raises:
        ConfigurationError: If `mode` is unknown.
        UsageError: If the composite is untrained.
        ContractViolationError: If a frozen stage changed.
    """
    if mode not in DEFENSE_MODES:
        raise ConfigurationError(f"defense mode must be one of {DEFENSE_MODES}, got {mode!r}")
    if not bool(composite.trained):
        raise UsageError("defense needs a trained composite model")

    torch.manual_seed(seed)
    model = deepcopy(composite).to(device)
    model.backbone.unfreeze(strategy.unfrozen_stages)
    model.head.requires_grad_(mode == "joint")
    frozen = strategy.frozen_stages
    pinned = model.backbone.stage_hash(frozen)

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.SGD(params, lr=strategy.learning_rate, momentum=0.9)
    train_set = task_subset(task.train, task.train_fraction, seed)
    loader = make_loader(train_set, batch_size, shuffle=True, seed=seed, collate_fn=collate_for(task))

    asr, clean = _measure(model, task, probe, device)
    curve = DefenseCurve(strategy.name, strategy.learning_rate, seed, mode, list(strategy.unfrozen_stages), asr, clean)
    log.info("defense %s: before fine-tuning asr %.4f clean %.4f", curve.label, asr, clean)
    for epoch in range(strategy.epochs):
        desc = f"defense {curve.label} {epoch + 1}/{strategy.epochs}"
        loss = train_task_epoch(model, loader, optimizer, task, device, desc, progress)
        if model.backbone.stage_hash(frozen) != pinned:
            raise ContractViolationError(f"frozen stages {frozen} changed during defense epoch {epoch + 1}")
        asr, clean = _measure(model, task, probe, device)
        curve.asr.append(asr)
        curve.clean.append(clean)
        log.info("defense %s epoch %d: loss %.4f asr %.4f clean %.4f", curve.label, epoch + 1, loss, asr, clean)
    return curve


def sweep_defense(
    composite: CompositeModel,
    task: DownstreamTask,
    strategies: Sequence[str],
    learning_rates: Sequence[float],
    probe: DefenseEval,
    *,
    epochs: int = 6,
    mode: str = "backbone",
    seed: int = 0,
    batch_size: int = 32,
    device: Any = "cpu",
    progress: bool = False,
) -> List[DefenseCurve]:
    """Run every (strategy, learning rate) cell with its own derived seed.

    Cell `(i, j)` is seeded from `(seed, i, j)`, so cells do not share state
    and a rerun reproduces each one.
    """
    if not strategies or not learning_rates:
        raise ConfigurationError("defense sweep needs at least one strategy and one learning rate")
    curves = []
    for i, name in enumerate(strategies):
        for j, lr in enumerate(learning_rates):
            cell_seed = int(np.random.SeedSequence([seed, i, j]).generate_state(1)[0])
            strategy = DefenseStrategy.named(name, lr, epochs)
            curves.append(
                run_finetune_defense(
                    composite,
                    task,
                    strategy,
                    probe,
                    mode=mode,
                    seed=cell_seed,
                    batch_size=batch_size,
                    device=device,
                    progress=progress,
                )
            )
    for finding in monotonicity_findings(curves):
        log.warning(finding)
    return curves


def monotonicity_findings(curves: Sequence[DefenseCurve], tolerance: float = MONOTONICITY_TOLERANCE) -> List[str]:
    """List cases where unfreezing more stages left a clearly higher final ASR.

    Curves are compared at matched learning rate.

    Examples:
        >>> minor = DefenseCurve("Minor", 1e-4, 0, "backbone", ["stage5"], 0.9, 0.5, [0.5], [0.5])
        >>> major = DefenseCurve("Major", 1e-4, 0, "backbone", ["stage3", "stage4", "stage5"], 0.9, 0.5, [0.7], [0.5])
        >>> monotonicity_findings([minor, major])
        ['Major lr=0.0001 ends at ASR 0.700, above Minor lr=0.0001 at 0.500']
    """
    findings = []
    by_lr: Dict[float, List[DefenseCurve]] = {}
    for curve in curves:
        by_lr.setdefault(curve.learning_rate, []).append(curve)
    for group in by_lr.values():
        for more in group:
            for fewer in group:
                if len(more.unfrozen_stages) <= len(fewer.unfrozen_stages):
                    continue
                if more.final_asr > fewer.final_asr + tolerance:
                    findings.append(
                        f"{more.label} ends at ASR {more.final_asr:.3f}, above {fewer.label} at {fewer.final_asr:.3f}"
                    )
    return findings


def plot_curves(curves: Sequence[DefenseCurve], path: Path, title: str = "fine-tuning defense") -> Path:
    """Plot epoch vs ASR and epoch vs clean metric side by side."""
    fig, (ax_asr, ax_clean) = plt.subplots(1, 2, figsize=(10, 4))
    for curve in curves:
        asr, clean = curve.trace()
        epochs = range(len(asr))
        ax_asr.plot(epochs, [100 * v for v in asr], marker="o", label=curve.label)
        ax_clean.plot(epochs, [100 * v for v in clean], marker="o", label=curve.label)
    ax_asr.set(xlabel="epoch", ylabel="ASR (%)", ylim=(0, 100))
    ax_clean.set(xlabel="epoch", ylabel="clean metric (%)", ylim=(0, 100))
    ax_asr.legend(fontsize="small")
    fig.suptitle(title)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
