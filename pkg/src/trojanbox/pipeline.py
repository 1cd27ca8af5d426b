"""Pipeline stages over a run directory.

A run lives in `<out>/<run_id>/` where `run_id` hashes the config together
with the code version. Each stage writes its artifacts into its own
subdirectory plus a `status.json` naming them with content hashes:

```
<run_id>/
  config.json
  trigger/    trigger.png (+ .json), generator.pt or mask.pt
  poison/     manifest.jsonl, images/
  pretrain/   backbone.pt (+ .json)
  inject/     backbone.pt (+ .json), injection.json
  transfer/   <task>/head.pt (+ .json), <task>/scenes/
  metrics/    report.json
  defense/    curves.json, defense.png
  logs/       run.log
```

A stage reads upstream artifacts only after checking their hashes, and a
completed stage is reused rather than recomputed.
"""

# native
from __future__ import annotations
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Any
from typing import Callable
from typing import Dict
from typing import Iterator
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from contextlib import contextmanager
import json
import logging
import sys

# lib
import matplotlib.pyplot as plt
import numpy as np
import torch

# pkg
from .attrdict import AttrDict
from .backbone import BackboneCheckpoint
from .config import build_config
from .config import config_hash
from .config import load_config
from .data import FolderDataset
from .data import ManifestDataset
from .data import TriggeredDataset
from .data import augmentation
from .data import ingest
from .data import load_images
from .data import sample_fraction
from .data import seed_everything
from .defense import DefenseCurve
from .defense import DefenseEval
from .defense import monotonicity_findings
from .defense import plot_curves
from .defense import sweep_defense
from .errors import AurocUndefinedError
from .errors import ConfigurationError
from .errors import DependencyError
from .errors import TrojanboxError
from .images import IMAGE_SUFFIXES
from .images import ImageList
from .images import file_hash
from .images import load_image
from .metrics import MetricsReport
from .metrics import auroc_f1
from .metrics import render_table
from .poison import PoisonManifest
from .poison import PoisonSpec
from .poison import TriggerPattern
from .poison import make_baseline_trigger
from .poison import poison_classification_dataset
from .status import StageStatus
from .stylizer import ContentImage
from .stylizer import PerceptualExtractor
from .stylizer import StylizerConfig
from .stylizer import load_style_set
from .stylizer import texture_variant
from .stylizer import train_generator
from .training import InjectionConfig
from .training import PretrainConfig
from .training import build_finetune_set
from .training import centroid_similarity
from .training import finetune_attack
from .training import inject_unsupervised
from .training import linear_probe
from .training import pretrain_supervised
from .training import train_contrastive_encoder
from .transfer import CompositeModel
from .transfer import DownstreamTask
from .transfer import TransferConfig
from .transfer import attack_success
from .transfer import build_classification_task
from .transfer import build_toy_detection_dataset
from .transfer import evaluate_task
from .transfer import stack_and_finetune
from .transfer import write_annotations

__all__ = [
    "STAGE_ORDER",
    "PRESETS_DIR",
    "RunContext",
    "setup_logging",
    "cmd_gen_trigger",
    "cmd_poison",
    "cmd_pretrain",
    "cmd_inject",
    "cmd_transfer",
    "cmd_eval",
    "cmd_defend",
    "run_stage",
    "cmd_pipeline",
    "cmd_report",
    "cmd_ablate",
    "cmd_ingest",
]

log = logging.getLogger(__name__)

STAGE_ORDER = ("trigger", "poison", "pretrain", "inject", "transfer", "metrics", "defense")
PRESETS_DIR = Path(__file__).parent / "presets"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
COMPETENCE_FLOOR = 0.7


def setup_logging(verbose: bool = False) -> logging.Logger:
    """Send package logs to stderr; `verbose` lowers the level to DEBUG."""
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logger = logging.getLogger("trojanbox")
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    return logger


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        name = "cuda" if torch.cuda.is_available() else "cpu"
    if name == "cuda" and not torch.cuda.is_available():
        raise ConfigurationError("device is cuda but CUDA is not available", ["device: cuda unavailable"])
    return torch.device(name)


@dataclass
class RunContext:
    """Config, run directory, and device shared by every stage of one run."""

    cfg: AttrDict
    run_dir: Path
    run_id: str
    device: torch.device
    progress: bool = False
    _cache: Dict[str, Any] = field(default_factory=dict, repr=False)

    @classmethod
    @contextmanager
    def open(cls, cfg: AttrDict, code_version: str, out: Optional[Path] = None) -> Iterator[RunContext]:
        """Create (or reopen) the run directory and log into `logs/run.log`."""
        run_id = config_hash(cfg, code_version)
        run_dir = Path(out or cfg.out) / run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        snapshot = json.dumps({"code_version": code_version, "config": cfg}, indent=2, sort_keys=True)
        (run_dir / "config.json").write_text(snapshot, encoding="utf-8")

        (run_dir / "logs").mkdir(exist_ok=True)
        handler = logging.FileHandler(run_dir / "logs" / "run.log", encoding="utf-8")
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger = logging.getLogger("trojanbox")
        logger.addHandler(handler)
        try:
            seed_everything(cfg.seed, cfg.deterministic)
            progress = bool(cfg.progress) and sys.stderr.isatty()
            log.info("run %s in %s", run_id, run_dir)
            yield cls(cfg, run_dir, run_id, resolve_device(cfg.device), progress)
        finally:
            logger.removeHandler(handler)
            handler.close()

    def stage_dir(self, name: str) -> Path:
        return self.run_dir / name

    def rel(self, path: Path) -> str:
        return str(path.relative_to(self.run_dir))

    def record(self, status: StageStatus, name: str, path: Path) -> StageStatus:
        return status.artifact(name, self.rel(path), file_hash(path))

    def done(self, stage: str) -> bool:
        """`True` if `stage` completed and its artifacts are intact."""
        try:
            self.require(stage)
        except DependencyError:
            return False
        return True

    def require(self, stage: str) -> StageStatus:
        """Return the completed status of `stage` after checking its artifacts.

        Raises:
            DependencyError: If the stage has not completed or an artifact is
                missing or no longer matches its recorded hash.
        """
        status = StageStatus.read(self.stage_dir(stage))
        if status is None or not status.complete:
            raise DependencyError(f"upstream stage {stage!r} has not completed in {self.run_dir}", stage)
        for name, artifact in (status.data or {}).items():
            path = self.run_dir / artifact["path"]
            if not path.is_file():
                raise DependencyError(f"{stage} artifact {name!r} is missing: {path}", artifact["path"])
            if file_hash(path) != artifact["hash"]:
                raise DependencyError(f"{stage} artifact {name!r} does not match its hash: {path}", artifact["path"])
        return status

    def artifact(self, stage: str, name: str) -> Path:
        status = self.require(stage)
        return self.run_dir / status.data[name]["path"]

    def finish(self, stage: str, status: StageStatus) -> StageStatus:
        status.write(self.stage_dir(stage))
        log.info("stage %s complete", stage)
        return status

    # shared inputs

    @property
    def data_root(self) -> Path:
        return Path(self.cfg.data.root)

    def images(self, split: str) -> ImageList:
        key = f"images:{split}"
        if key not in self._cache:
            folder = self.data_root / split
            if not folder.is_dir():
                raise ConfigurationError(f"missing {split} split", [f"data.root: no {split}/ under {self.data_root}"])
            self._cache[key] = ImageList.from_folder(folder)
        images: ImageList = self._cache[key]
        return images

    @property
    def target_label(self) -> str:
        label: str = self.cfg.poison.target_label
        if label not in self.images("train").classes:
            raise ConfigurationError(
                "unknown target label", [f"poison.target_label: {label!r} is not a class under {self.data_root}/train"]
            )
        return label

    @property
    def target_index(self) -> int:
        return self.images("train").class_index(self.target_label)

    def eval_subset(self, images: ImageList) -> ImageList:
        """Seeded subset of at most `eval.samples` images."""
        limit = self.cfg.eval.samples
        if len(images) <= limit:
            return images
        chosen = np.random.default_rng([self.cfg.seed, len(images)]).choice(len(images), limit, replace=False)
        return images.subset(sorted(chosen.tolist()))

    def trigger(self) -> Tuple[TriggerPattern, Optional[torch.Tensor]]:
        trigger = TriggerPattern.load(self.artifact("trigger", "trigger"))
        status = self.require("trigger")
        mask = None
        if "mask" in (status.data or {}):
            mask = torch.load(self.artifact("trigger", "mask"), weights_only=True)
        return trigger, mask

    def triggered_val(self) -> TriggeredDataset:
        trigger, mask = self.trigger()
        return TriggeredDataset(
            self.eval_subset(self.images("val")),
            self.cfg.data.image_size,
            trigger,
            mask,
            area_fraction=self.cfg.eval.area_fraction,
            seed=self.cfg.seed,
        )

    def clean_val(self) -> FolderDataset:
        return FolderDataset(self.eval_subset(self.images("val")), self.cfg.data.image_size)

    def task(self, kind: str) -> DownstreamTask:
        """Rebuild the downstream task of `kind`; identical for a given config."""
        cfg = self.cfg
        train, val = self.images("train"), self.images("val")
        if kind == "classification":
            return build_classification_task(
                train, val, self.target_label, image_size=cfg.data.image_size, train_fraction=cfg.transfer.train_fraction
            )
        return build_toy_detection_dataset(
            train,
            val,
            self.target_label,
            kind=kind,
            scenes=cfg.transfer.scenes,
            size=cfg.transfer.scene_size,
            objects=cfg.transfer.objects,
            object_size=cfg.transfer.object_size,
            train_fraction=cfg.transfer.train_fraction,
            seed=cfg.seed,
        )


def _reuse(ctx: RunContext, stage: str) -> bool:
    if ctx.done(stage):
        log.info("stage %s already complete; reusing its artifacts", stage)
        return True
    return False


def _content_corpus(folder: Path, size: int, limit: int, seed: int) -> torch.Tensor:
    paths = sorted(p for p in folder.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ConfigurationError("empty content corpus", [f"data.content_corpus: no images under {folder}"])
    if len(paths) > limit:
        chosen = np.random.default_rng([seed, len(paths)]).choice(len(paths), limit, replace=False)
        paths = [paths[i] for i in sorted(chosen.tolist())]
    return torch.stack([load_image(p, size) for p in paths])


def _style_dir(ctx: RunContext) -> Path:
    folder = Path(ctx.cfg.data.style_dir) if ctx.cfg.data.style_dir else ctx.data_root / "train" / ctx.target_label
    if not folder.is_dir():
        raise ConfigurationError("missing style directory", [f"data.style_dir: path does not exist: {folder}"])
    return folder


def _baseline_params(cfg: AttrDict) -> Dict[str, Any]:
    params: Dict[str, Any] = {
        "patch_size": cfg.poison.patch_size,
        "opacity": cfg.poison.opacity,
        "sig_delta": cfg.poison.sig_delta,
        "sig_frequency": cfg.poison.sig_frequency,
        "seed": cfg.seed,
    }
    if cfg.poison.blend_image:
        params["blend_image"] = cfg.poison.blend_image
    return params


def cmd_gen_trigger(ctx: RunContext) -> TriggerPattern:
    """Produce the trigger: stylized for `context_free`, fixed for baselines."""
    stage = ctx.stage_dir("trigger")
    if _reuse(ctx, "trigger"):
        return ctx.trigger()[0]

    cfg = ctx.cfg
    size = cfg.data.image_size
    method = cfg.poison.method
    status = StageStatus(stage="trigger", method=method)
    stage.mkdir(parents=True, exist_ok=True)

    if method == "context_free":
        if not cfg.data.content_image:
            raise ConfigurationError("no content image", ["data.content_image: required for context_free triggers"])
        content = ContentImage(load_image(cfg.data.content_image, size), Path(cfg.data.content_image).stem)
        style_set = load_style_set(_style_dir(ctx), ctx.target_label, size, cfg.stylizer.style_size, cfg.seed)
        generator = None
        if cfg.stylizer.texture == "texture":
            corpus_dir = Path(cfg.data.content_corpus) if cfg.data.content_corpus else ctx.data_root / "train"
            corpus = _content_corpus(corpus_dir, size, cfg.data.corpus_limit, cfg.seed)
            extractor = PerceptualExtractor(
                cfg.stylizer.content_layers, cfg.stylizer.style_layers, cfg.stylizer.extractor_weights
            )
            config = StylizerConfig(
                alpha=cfg.stylizer.alpha,
                epochs=cfg.stylizer.epochs,
                batch_size=cfg.stylizer.batch_size,
                learning_rate=cfg.stylizer.learning_rate,
                optimizer=cfg.stylizer.optimizer,
                seed=cfg.seed,
            )
            generator = train_generator(corpus, style_set, extractor, config, device=ctx.device, progress=ctx.progress)
            torch.save(generator.state_dict(), stage / "generator.pt")
            ctx.record(status, "generator", stage / "generator.pt")
            status.history = generator.history
        trigger = texture_variant(
            cfg.stylizer.texture, content, style_set, generator, nominal_size=cfg.poison.trigger_size
        )
        trigger.provenance.update(seed=cfg.seed, style_images=len(style_set))
    else:
        params = _baseline_params(cfg)
        if "blend_image" in params:
            params["blend_image"] = load_image(params["blend_image"], size)
        trigger, mask = make_baseline_trigger(method, params, size)
        trigger.target_label = ctx.target_label
        torch.save(mask, stage / "mask.pt")
        ctx.record(status, "mask", stage / "mask.pt")

    trigger.save(stage / "trigger.png")
    ctx.record(status, "trigger", stage / "trigger.png")
    ctx.record(status, "trigger_meta", stage / "trigger.json")
    ctx.finish("trigger", status)
    return trigger


def poison_spec(ctx: RunContext, ratio: Optional[float] = None) -> PoisonSpec:
    cfg = ctx.cfg
    method = cfg.poison.method
    if method == "context_free":
        params: Dict[str, Any] = {
            "canvas": cfg.poison.canvas,
            "canvas_range": list(cfg.poison.canvas_range),
            "trigger_range": list(cfg.poison.trigger_range),
        }
    else:
        params = _baseline_params(cfg)
    return PoisonSpec(method, ratio or cfg.poison.ratio, ctx.target_label, ctx.target_index, params, cfg.seed)


def cmd_poison(ctx: RunContext) -> PoisonManifest:
    """Write the poisoned training manifest (or the fine-tuning subset)."""
    stage = ctx.stage_dir("poison")
    if _reuse(ctx, "poison"):
        return PoisonManifest.read(ctx.artifact("poison", "manifest"))

    cfg = ctx.cfg
    trigger, mask = ctx.trigger()
    train = ctx.images("train")
    if cfg.inject.mode == "finetune_attack":
        spec = poison_spec(ctx, cfg.inject.finetune_poison_ratio)
        manifest = build_finetune_set(
            train,
            trigger,
            spec,
            cfg.inject.finetune_fraction,
            stage,
            mask=mask,
            image_size=cfg.data.image_size,
            workers=cfg.data.workers,
        )
    else:
        spec = poison_spec(ctx)
        manifest = poison_classification_dataset(
            train, spec, trigger, mask=mask, image_size=cfg.data.image_size, out_dir=stage, workers=cfg.data.workers
        )
        manifest.write(stage / "manifest.jsonl")

    status = StageStatus(stage="poison", spec_hash=spec.hash(), counts=manifest.counts)
    ctx.record(status, "manifest", stage / "manifest.jsonl")
    ctx.finish("poison", status)
    return manifest


def _manifest_dataset(ctx: RunContext, transform: Any) -> ManifestDataset:
    return ManifestDataset(
        ctx.artifact("poison", "manifest"),
        ctx.data_root / "train",
        ctx.cfg.data.image_size,
        transform,
        augment_poison=ctx.cfg.poison.augment,
    )


def cmd_pretrain(ctx: RunContext) -> BackboneCheckpoint:
    """Pre-train the source backbone.

    With `inject.mode = none` this is the poisoned supervised training.
    `finetune_attack` pre-trains on clean data and `unsupervised_align`
    trains a clean contrastive encoder; both are poisoned later by `inject`.
    """
    path = ctx.stage_dir("pretrain") / "backbone.pt"
    if _reuse(ctx, "pretrain"):
        return BackboneCheckpoint.load(path)

    cfg = ctx.cfg
    size = cfg.data.image_size
    train = ctx.images("train")
    mode = cfg.inject.mode
    if mode == "unsupervised_align":
        subset = sample_fraction(train, min(1.0, cfg.pretrain.contrastive_images / len(train)), cfg.seed)
        ckpt = train_contrastive_encoder(
            load_images(subset, size),
            epochs=cfg.pretrain.epochs,
            batch_size=cfg.pretrain.batch_size,
            learning_rate=cfg.pretrain.learning_rate,
            seed=cfg.seed,
            device=ctx.device,
            progress=ctx.progress,
        )
        ckpt.classes = list(train.classes)
    else:
        config = PretrainConfig(
            epochs=cfg.pretrain.epochs,
            batch_size=cfg.pretrain.batch_size,
            learning_rate=cfg.pretrain.learning_rate,
            warmup_learning_rate=cfg.pretrain.warmup_learning_rate,
            warmup_epochs=cfg.pretrain.warmup_epochs,
            momentum=cfg.pretrain.momentum,
            weight_decay=cfg.pretrain.weight_decay,
            augmentations=list(cfg.pretrain.augmentations),
            seed=cfg.seed,
        )
        transform = augmentation(config.augmentations, size)
        spec_hash = ""
        if mode == "none":
            spec_hash = ctx.require("poison").spec_hash
            train_set: Any = _manifest_dataset(ctx, transform)
            triggered: Optional[TriggeredDataset] = ctx.triggered_val()
        else:
            train_set = FolderDataset(train, size, transform)
            triggered = None
        ckpt = pretrain_supervised(
            train_set,
            len(train.classes),
            config,
            arch=cfg.pretrain.arch,
            target=ctx.target_index,
            clean_val=ctx.clean_val(),
            triggered_val=triggered,
            poison_spec_hash=spec_hash,
            classes=train.classes,
            device=ctx.device,
            progress=ctx.progress,
        )

    status = StageStatus(stage="pretrain", mode=mode, state_hash=ckpt.hash)
    ckpt.save(path)
    ctx.record(status, "backbone", path)
    ctx.record(status, "backbone_meta", path.with_suffix(".json"))
    ctx.finish("pretrain", status)
    return ckpt


def _poisoned_images(ctx: RunContext) -> torch.Tensor:
    manifest_path = ctx.artifact("poison", "manifest")
    manifest = PoisonManifest.read(manifest_path)
    size = ctx.cfg.data.image_size
    images = [load_image(manifest_path.parent / e.path, size) for e in manifest.entries if e.poisoned]
    return torch.stack(images)


def _injection_probe(
    ctx: RunContext,
    ckpt: BackboneCheckpoint,
    triggered: torch.Tensor,
    refs: torch.Tensor,
    probe_train: ImageList,
) -> Dict[str, float]:
    size = ctx.cfg.data.image_size
    val = ctx.eval_subset(ctx.images("val"))
    model = ckpt.build(ctx.device)
    return {
        "centroid_similarity": centroid_similarity(model, triggered, refs, device=ctx.device),
        "linear_probe": linear_probe(
            model,
            load_images(probe_train, size),
            [label for _, label in probe_train.samples],
            load_images(val, size),
            [label for _, label in val.samples],
            seed=ctx.cfg.seed,
            device=ctx.device,
        ),
    }


def cmd_inject(ctx: RunContext) -> BackboneCheckpoint:
    """Produce the backdoored backbone that downstream users receive."""
    stage = ctx.stage_dir("inject")
    path = stage / "backbone.pt"
    if _reuse(ctx, "inject"):
        return BackboneCheckpoint.load(path)

    cfg = ctx.cfg
    mode = cfg.inject.mode
    clean = BackboneCheckpoint.load(ctx.artifact("pretrain", "backbone"))
    status = StageStatus(stage="inject", mode=mode)

    if mode == "none":
        ckpt = clean
    elif mode == "finetune_attack":
        transform = augmentation(list(cfg.pretrain.augmentations), cfg.data.image_size)
        ckpt = finetune_attack(
            clean,
            _manifest_dataset(ctx, transform),
            _injection_config(cfg),
            target=ctx.target_index,
            clean_val=ctx.clean_val(),
            triggered_val=ctx.triggered_val(),
            poison_spec_hash=ctx.require("poison").spec_hash,
            device=ctx.device,
            progress=ctx.progress,
        )
    else:
        size = cfg.data.image_size
        triggered = _poisoned_images(ctx)
        refs = load_style_set(_style_dir(ctx), ctx.target_label, size, cfg.stylizer.style_size, cfg.seed).images
        ft_set = sample_fraction(ctx.images("train"), cfg.inject.ft_fraction, cfg.seed)
        before = _injection_probe(ctx, clean, triggered, refs, ft_set)
        ckpt = inject_unsupervised(
            clean, triggered, refs, load_images(ft_set, size), _injection_config(cfg), device=ctx.device, progress=ctx.progress
        )
        ckpt.poison_spec_hash = ctx.require("poison").spec_hash
        after = _injection_probe(ctx, ckpt, triggered, refs, ft_set)
        summary = {"before": before, "after": after}
        stage.mkdir(parents=True, exist_ok=True)
        (stage / "injection.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
        ctx.record(status, "injection", stage / "injection.json")
        log.info("injection probe: %s", summary)

    status.state_hash = ckpt.hash
    ckpt.save(path)
    ctx.record(status, "backbone", path)
    ctx.record(status, "backbone_meta", path.with_suffix(".json"))
    ctx.finish("inject", status)
    return ckpt


def _injection_config(cfg: AttrDict) -> InjectionConfig:
    return InjectionConfig(
        mode=cfg.inject.mode,
        epochs=cfg.inject.epochs,
        learning_rate=cfg.inject.learning_rate,
        warmup_learning_rate=cfg.inject.warmup_learning_rate,
        warmup_epochs=cfg.inject.warmup_epochs,
        frozen_stages=list(cfg.inject.frozen_stages),
        ft_fraction=cfg.inject.ft_fraction,
        attack_weight=cfg.inject.attack_weight,
        utility_weight=cfg.inject.utility_weight,
        batch_size=cfg.inject.batch_size,
        seed=cfg.seed,
    )


def _head_path(ctx: RunContext, kind: str) -> Path:
    return ctx.stage_dir("transfer") / kind / "head.pt"


def cmd_transfer(ctx: RunContext) -> Dict[str, CompositeModel]:
    """Fine-tune one head per task on top of the frozen backdoored backbone."""
    cfg = ctx.cfg
    backbone = BackboneCheckpoint.load(ctx.artifact("inject", "backbone"))
    if _reuse(ctx, "transfer"):
        return {kind: CompositeModel.load(_head_path(ctx, kind), backbone) for kind in cfg.transfer.tasks}

    status = StageStatus(stage="transfer", backbone_hash=backbone.hash, heads={})
    models = {}
    for kind in cfg.transfer.tasks:
        task = ctx.task(kind)
        config = TransferConfig(
            epochs=cfg.transfer.epochs,
            batch_size=cfg.transfer.batch_size,
            learning_rate=cfg.transfer.learning_rate,
            seed=cfg.seed,
        )
        model = stack_and_finetune(
            backbone, task, config, device=ctx.device, progress=ctx.progress, iou_thresh=cfg.eval.iou
        )
        path = model.save(_head_path(ctx, kind))
        ctx.record(status, f"{kind}_head", path)
        ctx.record(status, f"{kind}_head_meta", path.with_suffix(".json"))
        status.heads[kind] = {"head": model.head_id, "history": model.history}
        if kind != "classification":
            annotations = write_annotations(task.val, path.parent / "scenes")  # type: ignore[arg-type]
            ctx.record(status, f"{kind}_annotations", annotations)
        models[kind] = model
    ctx.finish("transfer", status)
    return models


def _read_scores(path: Path) -> Tuple[List[float], List[bool]]:
    scores, labels = [], []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            row = json.loads(line)
            scores.append(float(row["score"]))
            labels.append(bool(row["triggered"]))
    return scores, labels


def _clean_competence(report: MetricsReport, control_path: Path) -> Dict[str, Any]:
    control = MetricsReport.read(control_path)
    checks = {}
    for name in ("ca", "map"):
        value, reference = getattr(report, name), getattr(control, name)
        if value is not None and reference:
            checks[name] = {"value": value, "control": reference, "ok": value >= COMPETENCE_FLOOR * reference}
    valid = all(c["ok"] for c in checks.values())
    if not valid:
        log.warning("clean-task competence below %.0f%% of the clean control; attack numbers are not meaningful", 100 * COMPETENCE_FLOOR)
    return {"checks": checks, "valid": valid, "control": str(control_path)}


def cmd_eval(ctx: RunContext) -> MetricsReport:
    """Measure clean metrics and attack success for every transferred task."""
    stage = ctx.stage_dir("metrics")
    if _reuse(ctx, "metrics"):
        return MetricsReport.read(ctx.artifact("metrics", "report"))

    cfg = ctx.cfg
    ctx.require("transfer")
    models = cmd_transfer(ctx)
    trigger, mask = ctx.trigger()
    backbone_status = ctx.require("inject")

    report = MetricsReport(
        thresholds={
            "iou": cfg.eval.iou,
            "confidence": cfg.eval.confidence,
            "area_fraction": cfg.eval.area_fraction,
            "detector_threshold": cfg.eval.detector_threshold,
        },
        extras={"backbone_hash": backbone_status.state_hash, "method": cfg.poison.method},
    )
    for kind, model in models.items():
        model.to(ctx.device)
        task = ctx.task(kind)
        clean = evaluate_task(model, task, device=ctx.device, iou_thresh=cfg.eval.iou)
        stats = attack_success(
            model,
            task,
            trigger,
            mask,
            seed=cfg.seed,
            area_fraction=cfg.eval.area_fraction,
            iou_thresh=cfg.eval.iou,
            conf_thresh=cfg.eval.confidence,
            limit=cfg.eval.samples,
            device=ctx.device,
        )
        report.asr[kind] = stats["asr"]
        report.counts[f"{kind}_placements"] = stats["total"]
        report.extras[kind] = {"clean": clean, "head": model.head_id, **stats}
        if kind == "classification":
            report.ca = clean
        elif report.map is None or kind == "detection":
            report.map = clean
        log.info("%s: clean %.4f asr %.4f", kind, clean, stats["asr"])

    pretrain = BackboneCheckpoint.load(ctx.artifact("pretrain", "backbone"))
    if pretrain.history:
        report.extras["source"] = pretrain.history[-1]
    if "injection" in (backbone_status.data or {}):
        report.extras["injection"] = json.loads(ctx.artifact("inject", "injection").read_text(encoding="utf-8"))
    if cfg.eval.clean_control:
        report.extras["clean_competence"] = _clean_competence(report, Path(cfg.eval.clean_control))
    if cfg.eval.detector_scores:
        scores, labels = _read_scores(Path(cfg.eval.detector_scores))
        try:
            report.auroc, report.f1 = auroc_f1(scores, labels, cfg.eval.detector_threshold)
        except AurocUndefinedError as e:
            log.warning("%s; reporting F1 only", e)
            report.f1 = e.f1

    path = report.write(stage / "report.json")
    status = StageStatus(stage="metrics")
    ctx.record(status, "report", path)
    ctx.finish("metrics", status)
    return report


def cmd_defend(ctx: RunContext) -> List[DefenseCurve]:
    """Sweep the fine-tuning defense over strategies and learning rates."""
    stage = ctx.stage_dir("defense")
    if _reuse(ctx, "defense"):
        data = json.loads(ctx.artifact("defense", "curves").read_text(encoding="utf-8"))
        return [DefenseCurve(**c) for c in data]

    cfg = ctx.cfg
    kind = cfg.defense.task
    if kind not in cfg.transfer.tasks:
        raise ConfigurationError("defense task was not transferred", [f"defense.task: {kind!r} not in transfer.tasks"])
    backbone = BackboneCheckpoint.load(ctx.artifact("inject", "backbone"))
    composite = CompositeModel.load(ctx.artifact("transfer", f"{kind}_head"), backbone)
    trigger, mask = ctx.trigger()
    probe = DefenseEval(
        trigger,
        mask,
        seed=cfg.seed,
        area_fraction=cfg.eval.area_fraction,
        iou=cfg.eval.iou,
        confidence=cfg.eval.confidence,
        samples=cfg.eval.samples,
    )
    curves = sweep_defense(
        composite,
        ctx.task(kind),
        list(cfg.defense.strategies),
        list(cfg.defense.learning_rates),
        probe,
        epochs=cfg.defense.epochs,
        mode=cfg.defense.mode,
        seed=cfg.seed,
        batch_size=cfg.transfer.batch_size,
        device=ctx.device,
        progress=ctx.progress,
    )

    stage.mkdir(parents=True, exist_ok=True)
    curves_path = stage / "curves.json"
    curves_path.write_text(json.dumps([json.loads(c.to_json()) for c in curves], indent=2, sort_keys=True), encoding="utf-8")
    plot = plot_curves(curves, stage / "defense.png", title=f"fine-tuning defense ({kind}, {cfg.defense.mode})")
    status = StageStatus(stage="defense", task=kind, findings=monotonicity_findings(curves))
    ctx.record(status, "curves", curves_path)
    ctx.record(status, "plot", plot)
    ctx.finish("defense", status)
    return curves


STAGES: Dict[str, Callable[[RunContext], Any]] = {
    "trigger": cmd_gen_trigger,
    "poison": cmd_poison,
    "pretrain": cmd_pretrain,
    "inject": cmd_inject,
    "transfer": cmd_transfer,
    "metrics": cmd_eval,
    "defense": cmd_defend,
}


def run_stage(ctx: RunContext, name: str) -> Any:
    """Run one stage, recording a `fail` or `error` status if it raises."""
    if name not in STAGES:
        raise ConfigurationError(f"unknown stage {name!r}; expected one of {list(STAGE_ORDER)}")
    try:
        return STAGES[name](ctx)
    except TrojanboxError as e:
        StageStatus(stage=name).fail(str(e)).write(ctx.stage_dir(name))
        raise
    except Exception as e:
        StageStatus(stage=name).error(str(e), type(e).__name__).write(ctx.stage_dir(name))
        raise


def cmd_pipeline(ctx: RunContext, *, defend: bool = True) -> MetricsReport:
    """Run every stage in order, reusing the ones already complete."""
    for name in STAGE_ORDER:
        if name != "defense" or defend:
            run_stage(ctx, name)
    return MetricsReport.read(ctx.artifact("metrics", "report"))


def _run_label(run_dir: Path) -> str:
    snapshot = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    return f"{snapshot['config']['poison']['method']} ({run_dir.name})"


def _collect_runs(paths: Sequence[Path]) -> Tuple[Dict[str, Path], List[Dict[str, Any]]]:
    runs: Dict[str, Path] = {}
    ablations: List[Dict[str, Any]] = []
    for path in paths:
        summary_path = path / "ablation.json"
        if summary_path.is_file():
            summary = json.loads(summary_path.read_text(encoding="utf-8"))
            ablations.append(summary)
            for entry in summary["runs"]:
                runs[f"{summary['preset']}: {entry['label']}"] = Path(entry["run_dir"])
        else:
            runs[_run_label(path) if (path / "config.json").is_file() else path.name] = path
    return runs, ablations


def plot_ablation(summary: Dict[str, Any], path: Path) -> Path:
    """Bar chart of attack success per ablation setting."""
    labels = [e["label"] for e in summary["runs"]]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 4))
    kinds = sorted({k for e in summary["runs"] for k in e["asr"]})
    width = 0.8 / max(1, len(kinds))
    for i, kind in enumerate(kinds):
        values = [100 * e["asr"].get(kind, 0.0) for e in summary["runs"]]
        ax.bar(np.arange(len(labels)) + i * width, values, width, label=kind)
    ax.set_xticks(np.arange(len(labels)) + width * (len(kinds) - 1) / 2)
    ax.set_xticklabels(labels)
    ax.set(ylabel="ASR (%)", ylim=(0, 100), title=f"ablation: {summary['preset']}")
    ax.legend(fontsize="small")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def cmd_report(paths: Sequence[Path], out: Optional[Path] = None) -> str:
    """Render a comparison table (and ablation plots) from completed runs.

    Incomplete runs are listed with a warning and skipped.
    """
    runs, ablations = _collect_runs(paths)
    rows: Dict[str, MetricsReport] = {}
    for label, run_dir in runs.items():
        status = StageStatus.read(run_dir / "metrics")
        if status is None or not status.complete:
            log.warning("skipping incomplete run %s (%s)", label, run_dir)
            continue
        rows[label] = MetricsReport.read(run_dir / status.data["report"]["path"])
    if not rows:
        raise DependencyError("no completed runs to report", "metrics")

    table = render_table(rows)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.md").write_text(table + "\n", encoding="utf-8")
        for summary in ablations:
            plot_ablation(summary, out / f"ablation-{summary['preset']}.png")
    return table


def load_preset(name: str) -> AttrDict:
    """Load an ablation preset by name (bundled) or by path."""
    path = Path(name)
    if not path.is_file():
        path = PRESETS_DIR / "ablation" / f"{name}.toml"
    if not path.is_file():
        known = sorted(p.stem for p in (PRESETS_DIR / "ablation").glob("*.toml"))
        raise ConfigurationError(f"unknown ablation preset {name!r}", [f"--preset: expected one of {known} or a file"])
    preset = load_config(path)
    if not preset.ablation or not preset.ablation.runs:
        raise ConfigurationError("preset has no runs", [f"{path}: missing [[ablation.runs]]"])
    return preset


def cmd_ablate(
    cfg: AttrDict,
    preset_name: str,
    code_version: str,
    *,
    out: Optional[Path] = None,
) -> Dict[str, Any]:
    """Run the pipeline once per preset setting and summarize the results.

    Each setting merges its `set` table over `cfg` and runs in its own run
    directory; the summary goes to `<out>/ablation-<preset>-<hash>/`.
    """
    preset = load_preset(preset_name)
    name = preset.ablation.get("name") or Path(preset_name).stem
    root = Path(out or cfg.out)
    base = AttrDict(cfg)
    base.pop("ablation", None)

    entries = []
    for run in preset.ablation.runs:
        label = str(run["label"])
        child = build_config(overrides=AttrDict(base) << (run.get("set") or {}))
        with RunContext.open(child, code_version, root) as ctx:
            log.info("ablation %s: %s", name, label)
            report = cmd_pipeline(ctx, defend=False)
            entries.append({"label": label, "run_id": ctx.run_id, "run_dir": str(ctx.run_dir), "asr": report.asr})

    summary = {"preset": name, "base": config_hash(base, code_version), "runs": entries}
    summary_dir = root / f"ablation-{name}-{summary['base']}"
    summary_dir.mkdir(parents=True, exist_ok=True)
    (summary_dir / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    plot_ablation(summary, summary_dir / "ablation.png")
    return summary


def cmd_ingest(
    root: Path,
    *,
    dataset: str = "cifar10",
    size: int = 64,
    per_class: Optional[int] = None,
    progress: bool = True,
) -> Path:
    """Export the desk-scale dataset into `root/train` and `root/val`."""
    train, val = ingest(root, dataset=dataset, size=size, per_class=per_class, progress=progress)
    log.info("ingested %d train / %d val images into %s", len(train), len(val), root)
    return root
