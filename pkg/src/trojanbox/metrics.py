"""Clean accuracy, attack success rates, mAP, AUROC, and F1.

All functions are pure: the same records always give the same rates, and every
rate lies in [0, 1]. Percentages only appear in `render_table`.
"""

# native
from __future__ import annotations
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Any
from typing import Dict
from typing import Iterable
from typing import List
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Tuple
import json
import logging

# lib
from sklearn.metrics import f1_score
from sklearn.metrics import roc_auc_score
import numpy as np

# pkg
from .errors import AurocUndefinedError
from .errors import DataError
from .errors import EvaluationError

__all__ = [
    "Box",
    "Detection",
    "GroundTruth",
    "PredictionRecord",
    "DetectionRecord",
    "Counts",
    "MetricsReport",
    "iou",
    "mask_iou",
    "clean_accuracy",
    "asr_classification",
    "asr_detection",
    "detection_attack_stats",
    "mean_average_precision",
    "auroc_f1",
    "render_table",
]

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by its center and size in pixels."""

    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_corner(cls, x0: float, y0: float, w: float, h: float) -> Box:
        """Return the box with top-left corner `(x0, y0)`.

        Examples:
            >>> Box.from_corner(10, 20, 8, 4)
            Box(cx=14.0, cy=22.0, w=8, h=4)
        """
        return cls(x0 + w / 2, y0 + h / 2, w, h)

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)

    def inside(self, width: float, height: float) -> bool:
        """Return `True` if the box lies fully inside a `width` x `height` image.

        Examples:
            >>> Box.from_corner(0, 0, 64, 64).inside(64, 64)
            True
            >>> Box.from_corner(1, 0, 64, 64).inside(64, 64)
            False
        """
        return self.x0 >= 0 and self.y0 >= 0 and self.x1 <= width and self.y1 <= height

    def to_list(self) -> List[float]:
        return [float(self.cx), float(self.cy), float(self.w), float(self.h)]

    def rasterize(self, height: int, width: int) -> np.ndarray:
        """Return a boolean `height` x `width` mask of the pixels inside the box."""
        mask = np.zeros((height, width), dtype=bool)
        x0, y0 = max(int(round(self.x0)), 0), max(int(round(self.y0)), 0)
        x1, y1 = min(int(round(self.x1)), width), min(int(round(self.y1)), height)
        mask[y0:y1, x0:x1] = True
        return mask


@dataclass
class Detection:
    """One predicted object: class, confidence, box, and an optional mask."""

    class_id: int
    confidence: float
    box: Box
    mask: Optional[np.ndarray] = None


@dataclass
class GroundTruth:
    """One annotated object."""

    class_id: int
    box: Box
    mask: Optional[np.ndarray] = None


@dataclass(frozen=True)
class PredictionRecord:
    """Classifier output for one image."""

    predicted: int
    true: int
    triggered: bool
    target: int


@dataclass
class DetectionRecord:
    """Detector output for one image plus its annotations.

    Triggered records carry the `attack_box` where the trigger was placed and
    the `target_class` the trigger should evoke.
    """

    image_id: str
    detections: List[Detection]
    ground_truth: List[GroundTruth] = field(default_factory=list)
    attack_box: Optional[Box] = None
    target_class: Optional[int] = None
    trigger_mask: Optional[np.ndarray] = None


@dataclass(frozen=True)
class Counts:
    """Exact hit/total counts; shards combine by addition, not rate averaging.

    Examples:
        >>> (Counts(3, 4) + Counts(1, 6)).rate
        0.4
    """

    hits: int
    total: int

    def __add__(self, other: Counts) -> Counts:
        return Counts(self.hits + other.hits, self.total + other.total)

    @property
    def rate(self) -> float:
        if self.total == 0:
            raise EvaluationError("no records to evaluate")
        return self.hits / self.total


def iou(box_a: Box, box_b: Box) -> float:
    """Return the intersection over union of two boxes.

    Degenerate (zero-area) boxes have IoU 0 against any box.

    Examples:
        >>> iou(Box(0, 0, 1, 1), Box(0, 0, 1, 1))
        1.0
        >>> iou(Box(0, 0, 1, 1), Box(5, 5, 1, 1))
        0.0
        >>> round(iou(Box(0, 0, 1, 1), Box(0.5, 0, 1, 1)), 12)
        0.333333333333
    """
    if box_a.area <= 0 or box_b.area <= 0:
        log.debug("degenerate box in IoU: %s vs %s", box_a, box_b)
        return 0.0

    inter_w = max(0.0, min(box_a.x1, box_b.x1) - max(box_a.x0, box_b.x0))
    inter_h = max(0.0, min(box_a.y1, box_b.y1) - max(box_a.y0, box_b.y0))
    inter = inter_w * inter_h
    union = box_a.area + box_b.area - inter
    return float(inter / union) if union > 0 else 0.0


def mask_iou(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Return the IoU of two boolean masks of the same shape.

    Examples:
        >>> a = np.zeros((4, 4), bool); a[:2] = True
        >>> b = np.zeros((4, 4), bool); b[1:3] = True
        >>> round(mask_iou(a, b), 6)
        0.333333
    """
    if mask_a.shape != mask_b.shape:
        raise DataError(f"mask shapes differ: {mask_a.shape} vs {mask_b.shape}")
    union = np.logical_or(mask_a, mask_b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(mask_a, mask_b).sum() / union)


def clean_accuracy(records: Sequence[PredictionRecord]) -> float:
    """Return the fraction of clean records predicted correctly.

    Examples:
        >>> recs = [PredictionRecord(p, 1, False, 0) for p in (1, 1, 1, 2)]
        >>> clean_accuracy(recs)
        0.75
    """
    if not records:
        raise EvaluationError("clean accuracy needs at least one record")
    if any(r.triggered for r in records):
        raise EvaluationError("clean accuracy expects clean records only")
    return sum(r.predicted == r.true for r in records) / len(records)


def asr_classification(records: Sequence[PredictionRecord]) -> float:
    """Return the fraction of triggered records predicted as their target.

    Examples:
        >>> recs = [PredictionRecord(p, 1, True, 0) for p in (0, 0, 3)]
        >>> round(asr_classification(recs), 4)
        0.6667
    """
    if not records:
        raise EvaluationError("ASR needs at least one record")
    if not all(r.triggered for r in records):
        raise EvaluationError("ASR expects triggered records only")
    return sum(r.predicted == r.target for r in records) / len(records)


def _attack_hits(
    record: DetectionRecord,
    iou_thresh: float,
    conf_thresh: float,
    segmentation: bool,
) -> List[Detection]:
    if record.attack_box is None:
        raise DataError(f"triggered record {record.image_id} has no attack_box")
    if record.target_class is None:
        raise DataError(f"triggered record {record.image_id} has no target_class")

    hits = []
    for det in record.detections:
        if det.class_id != record.target_class or det.confidence < conf_thresh:
            continue
        if iou(det.box, record.attack_box) < iou_thresh:
            continue
        if segmentation:
            if det.mask is None:
                continue
            region = record.trigger_mask
            if region is None:
                region = record.attack_box.rasterize(*det.mask.shape)
            if mask_iou(det.mask, region) < iou_thresh:
                continue
        hits.append(det)
    return hits


def asr_detection(
    records: Sequence[DetectionRecord],
    iou_thresh: float = 0.5,
    conf_thresh: float = 0.5,
    *,
    segmentation: bool = False,
) -> float:
    """Return the fraction of trigger placements that evoke a target box.

    A record succeeds if some detection of the target class has confidence at
    least `conf_thresh` and IoU with the attack box at least `iou_thresh`.
    Several qualifying boxes on one placement count once. With `segmentation`,
    the detection's mask must also reach `iou_thresh` mask IoU against the
    trigger region.

    Examples:
        >>> rec = DetectionRecord("a", [Detection(0, 0.9, Box(8, 8, 4, 4))],
        ...                       attack_box=Box(8, 8, 4, 4), target_class=0)
        >>> asr_detection([rec])
        1.0
    """
    return detection_attack_stats(records, iou_thresh, conf_thresh, segmentation=segmentation)["asr"]


def detection_attack_stats(
    records: Sequence[DetectionRecord],
    iou_thresh: float = 0.5,
    conf_thresh: float = 0.5,
    *,
    segmentation: bool = False,
) -> Dict[str, Any]:
    """Return detection ASR plus extra-box and overlap statistics.

    Keys: `asr`, `successes`, `total`, `extra_target_boxes` (confident target
    boxes that are not the first hit on their placement), and
    `placements_on_target_objects` (placements overlapping a ground-truth
    object of the target class; they are not excluded).
    """
    if not records:
        raise EvaluationError("detection ASR needs at least one record")

    successes = extra = on_target = 0
    for record in records:
        hits = _attack_hits(record, iou_thresh, conf_thresh, segmentation)
        successes += bool(hits)
        confident = [
            d
            for d in record.detections
            if d.class_id == record.target_class and d.confidence >= conf_thresh
        ]
        extra += len(confident) - (1 if hits else 0)
        assert record.attack_box is not None
        attack_box = record.attack_box
        on_target += any(
            g.class_id == record.target_class and iou(g.box, attack_box) > 0
            for g in record.ground_truth
        )
    return {
        "asr": successes / len(records),
        "successes": successes,
        "total": len(records),
        "extra_target_boxes": extra,
        "placements_on_target_objects": on_target,
    }


def _average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under the precision/recall curve."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changes = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def mean_average_precision(
    records: Sequence[DetectionRecord],
    iou_thresh: float = 0.5,
    *,
    masks: bool = False,
) -> float:
    """Return mean average precision over the classes present in ground truth.

    Detections of each class are ranked by confidence; ties are broken by
    `(image_id, cx, cy, w, h)` so the result does not depend on input order.
    Each detection is matched to the unmatched ground-truth box of its class in
    the same image with the highest IoU, if that IoU reaches `iou_thresh`.
    With `masks`, IoU is computed on masks instead of boxes.

    Examples:
        >>> gt = [GroundTruth(0, Box(10, 10, 4, 4))]
        >>> perfect = DetectionRecord("a", [Detection(0, 0.9, Box(10, 10, 4, 4))], gt)
        >>> mean_average_precision([perfect])
        1.0
        >>> wrong = DetectionRecord("a", [Detection(1, 0.9, Box(10, 10, 4, 4))], gt)
        >>> mean_average_precision([wrong])
        0.0
    """
    gt_by_class: Dict[int, Dict[str, List[GroundTruth]]] = {}
    for record in records:
        for gt in record.ground_truth:
            gt_by_class.setdefault(gt.class_id, {}).setdefault(record.image_id, []).append(gt)
    if not gt_by_class:
        raise EvaluationError("mAP needs at least one ground-truth object")

    def overlap(det: Detection, gt: GroundTruth) -> float:
        if masks:
            if det.mask is None or gt.mask is None:
                return 0.0
            return mask_iou(det.mask, gt.mask)
        return iou(det.box, gt.box)

    aps = []
    for class_id in sorted(gt_by_class):
        gts = gt_by_class[class_id]
        n_gt = sum(len(v) for v in gts.values())
        dets: List[Tuple[str, Detection]] = [
            (r.image_id, d) for r in records for d in r.detections if d.class_id == class_id
        ]
        dets.sort(key=lambda x: (-x[1].confidence, x[0], x[1].box.cx, x[1].box.cy, x[1].box.w, x[1].box.h))

        matched = {image_id: [False] * len(v) for image_id, v in gts.items()}
        true_pos = np.zeros(len(dets))
        for i, (image_id, det) in enumerate(dets):
            best, best_j = iou_thresh, -1
            for j, gt in enumerate(gts.get(image_id, [])):
                if matched[image_id][j]:
                    continue
                value = overlap(det, gt)
                if value >= best:
                    best, best_j = value, j
            if best_j >= 0:
                matched[image_id][best_j] = True
                true_pos[i] = 1

        if not dets:
            aps.append(0.0)
            continue
        acc_tp = np.cumsum(true_pos)
        acc_fp = np.cumsum(1 - true_pos)
        recall = acc_tp / n_gt
        precision = acc_tp / (acc_tp + acc_fp)
        aps.append(_average_precision(recall, precision))
    return float(np.mean(aps))


def auroc_f1(scores: Sequence[float], labels: Sequence[bool], threshold: float) -> Tuple[float, float]:
    """Return `(auroc, f1)` for detector scores against triggered flags.

    AUROC is the rank statistic with ties counted as one half; F1 treats
    `score >= threshold` as a positive prediction.

    Raises:
        AurocUndefinedError: if `labels` has a single class; `e.f1` is set.

    Examples:
        >>> auroc_f1([0.1, 0.2, 0.8, 0.9], [False, False, True, True], 0.5)
        (1.0, 1.0)
        >>> auroc_f1([0.5, 0.5, 0.5, 0.5], [False, True, False, True], 0.5)[0]
        0.5
    """
    if len(scores) != len(labels) or not scores:
        raise EvaluationError("scores and labels must be nonempty and the same length")

    y_true = np.asarray(labels, dtype=int)
    y_pred = (np.asarray(scores, dtype=float) >= threshold).astype(int)
    f1 = float(f1_score(y_true, y_pred, zero_division=0))
    if len(set(y_true.tolist())) < 2:
        raise AurocUndefinedError("AUROC is undefined with a single class", f1)
    return float(roc_auc_score(y_true, np.asarray(scores, dtype=float))), f1


@dataclass
class MetricsReport:
    """Metrics of one run with the exact thresholds used.

    Examples:
        >>> report = MetricsReport(ca=0.9, asr={"classification": 0.97},
        ...                        thresholds={"iou": 0.5})
        >>> MetricsReport.from_json(report.to_json()) == report
        True
    """

    ca: Optional[float] = None
    asr: Dict[str, float] = field(default_factory=dict)
    map: Optional[float] = None
    auroc: Optional[float] = None
    f1: Optional[float] = None
    thresholds: Dict[str, float] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)
    extras: Dict[str, Any] = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def __post_init__(self) -> None:
        rates = [self.ca, self.map, self.auroc, self.f1, *self.asr.values()]
        for rate in rates:
            if rate is not None and not 0.0 <= rate <= 1.0:
                raise EvaluationError(f"rate out of [0, 1]: {rate}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> MetricsReport:
        data = json.loads(text)
        if data.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise DataError(f"unsupported report schema: {data.get('schema_version')}")
        return cls(**data)

    def write(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: Path) -> MetricsReport:
        return cls.from_json(path.read_text(encoding="utf-8"))


def _pct(value: Optional[float]) -> str:
    return "-" if value is None else f"{100 * value:.2f}"


TABLE_COLUMNS = (
    ("CA", lambda r: r.ca),
    ("ASR (cls)", lambda r: r.asr.get("classification")),
    ("mAP", lambda r: r.map),
    ("ASR (det)", lambda r: r.asr.get("detection")),
    ("ASR (seg)", lambda r: r.asr.get("segmentation")),
)


def render_table(rows: Mapping[str, MetricsReport], columns: Optional[Iterable[str]] = None) -> str:
    """Render reports as a markdown table of percentages, one row per method.

    Examples:
        >>> print(render_table({"ours": MetricsReport(ca=0.75,
        ...     asr={"classification": 1.0, "detection": 0.875}, map=0.5)},
        ...     ["CA", "ASR (cls)", "mAP", "ASR (det)"]))
        | Method | CA | ASR (cls) | mAP | ASR (det) |
        |---|---|---|---|---|
        | ours | 75.00 | 100.00 | 50.00 | 87.50 |
    """
    wanted = list(columns) if columns is not None else [name for name, _ in TABLE_COLUMNS]
    getters = dict(TABLE_COLUMNS)
    lines = [
        "| Method | " + " | ".join(wanted) + " |",
        "|" + "---|" * (len(wanted) + 1),
    ]
    for name, report in rows.items():
        cells = [_pct(getters[col](report)) for col in wanted]
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines)
