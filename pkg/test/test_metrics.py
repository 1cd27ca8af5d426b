"""Test metric functions against hand-counted and brute-force values."""

# native
from itertools import product
from pathlib import Path
from typing import List
import random

# lib
import numpy as np
import pytest

# pkg
from trojanbox.errors import AurocUndefinedError
from trojanbox.errors import DataError
from trojanbox.errors import EvaluationError
from trojanbox.metrics import Box
from trojanbox.metrics import Counts
from trojanbox.metrics import Detection
from trojanbox.metrics import DetectionRecord
from trojanbox.metrics import GroundTruth
from trojanbox.metrics import MetricsReport
from trojanbox.metrics import PredictionRecord
from trojanbox.metrics import asr_classification
from trojanbox.metrics import asr_detection
from trojanbox.metrics import auroc_f1
from trojanbox.metrics import clean_accuracy
from trojanbox.metrics import detection_attack_stats
from trojanbox.metrics import iou
from trojanbox.metrics import mean_average_precision
from trojanbox.metrics import render_table

ATTACK = Box(16, 16, 8, 8)


def test_iou_closed_form() -> None:
    """Expect half-overlapping unit boxes to have IoU 1/3."""
    have = iou(Box(0, 0, 1, 1), Box(0.5, 0, 1, 1))
    assert have == pytest.approx(1 / 3, abs=1e-12)


def test_iou_symmetric() -> None:
    """Expect iou(a, b) == iou(b, a) exactly."""
    rng = random.Random(3)
    for _ in range(200):
        a = Box(rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0.1, 5), rng.uniform(0.1, 5))
        b = Box(rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0.1, 5), rng.uniform(0.1, 5))
        assert iou(a, b) == iou(b, a)


def test_iou_degenerate() -> None:
    """Expect zero-area boxes to have IoU 0."""
    assert iou(Box(0, 0, 0, 1), Box(0, 0, 0, 1)) == 0.0


def test_clean_accuracy_mixed() -> None:
    """Expect 7 of 10 correct to be 0.7."""
    records = [PredictionRecord(1 if i < 7 else 2, 1, False, 0) for i in range(10)]
    assert clean_accuracy(records) == 0.7


def test_rates_match_recount() -> None:
    """Expect rates to match a recount over random records."""
    rng = np.random.default_rng(11)
    predicted = rng.integers(0, 5, 1000)
    true = rng.integers(0, 5, 1000)
    clean = [PredictionRecord(int(p), int(t), False, 0) for p, t in zip(predicted, true)]
    triggered = [PredictionRecord(int(p), int(t), True, 3) for p, t in zip(predicted, true)]

    assert clean_accuracy(clean) == np.count_nonzero(predicted == true) / 1000
    assert asr_classification(triggered) == np.count_nonzero(predicted == 3) / 1000


def test_rates_reject_wrong_split() -> None:
    """Expect CA and ASR to refuse records of the other kind."""
    with pytest.raises(EvaluationError):
        clean_accuracy([PredictionRecord(0, 0, True, 0)])
    with pytest.raises(EvaluationError):
        asr_classification([PredictionRecord(0, 0, False, 0)])
    with pytest.raises(EvaluationError):
        asr_classification([])


def test_counts_combine_exactly() -> None:
    """Expect shards to add counts rather than average rates."""
    have = (Counts(1, 2) + Counts(0, 8)).rate
    assert have == 0.1


def _three_records() -> List[DetectionRecord]:
    return [
        DetectionRecord("hit", [Detection(0, 0.9, ATTACK)], attack_box=ATTACK, target_class=0),
        DetectionRecord("wrong-class", [Detection(1, 0.9, ATTACK)], attack_box=ATTACK, target_class=0),
        DetectionRecord("low-conf", [Detection(0, 0.4, ATTACK)], attack_box=ATTACK, target_class=0),
    ]


def test_asr_detection_three_records() -> None:
    """Expect one success out of three placements."""
    records = _three_records()
    hits = 0
    for record in records:
        pairs = [
            det.class_id == record.target_class and det.confidence >= 0.5 and iou(det.box, record.attack_box) >= 0.5
            for det in record.detections
        ]
        hits += any(pairs)
    assert hits == 1
    assert asr_detection(records) == pytest.approx(1 / 3)


def _random_records(n: int, seed: int) -> List[DetectionRecord]:
    rng = random.Random(seed)
    records = []
    for k in range(n):
        dets = [
            Detection(
                rng.randrange(2),
                rng.random(),
                Box(ATTACK.cx + rng.uniform(-6, 6), ATTACK.cy + rng.uniform(-6, 6), rng.uniform(4, 12), rng.uniform(4, 12)),
            )
            for _ in range(rng.randrange(4))
        ]
        records.append(DetectionRecord(f"r{k}", dets, attack_box=ATTACK, target_class=0))
    return records


def test_asr_detection_threshold_monotone() -> None:
    """Expect raising either threshold never to raise detection ASR."""
    records = _random_records(40, seed=11)
    grid = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0]
    for fixed in grid:
        by_iou = [asr_detection(records, iou_thresh=t, conf_thresh=fixed) for t in grid]
        by_conf = [asr_detection(records, iou_thresh=fixed, conf_thresh=t) for t in grid]
        for curve in (by_iou, by_conf):
            assert all(hi <= lo for lo, hi in zip(curve, curve[1:]))
    assert asr_detection(records, 0.0, 0.0) > asr_detection(records, 0.9, 0.9)


def test_asr_detection_counts_once() -> None:
    """Expect several target boxes on one placement to count once."""
    dets = [Detection(0, 0.9, ATTACK), Detection(0, 0.8, Box(17, 16, 8, 8)), Detection(0, 0.7, Box(50, 50, 4, 4))]
    record = DetectionRecord("a", dets, attack_box=ATTACK, target_class=0)
    stats = detection_attack_stats([record])
    assert stats["asr"] == 1.0
    assert stats["extra_target_boxes"] == 2


def test_asr_detection_placements_on_target() -> None:
    """Expect placements over target objects to be counted, not excluded."""
    gt = [GroundTruth(0, Box(18, 18, 10, 10))]
    record = DetectionRecord("a", [], gt, attack_box=ATTACK, target_class=0)
    stats = detection_attack_stats([record])
    assert (stats["asr"], stats["placements_on_target_objects"]) == (0.0, 1)


def test_asr_detection_needs_attack_box() -> None:
    """Expect a triggered record without an attack box to be rejected."""
    with pytest.raises(DataError):
        asr_detection([DetectionRecord("a", [], target_class=0)])


def test_asr_segmentation_needs_mask_overlap() -> None:
    """Expect segmentation ASR to also check the mask."""
    good = ATTACK.rasterize(32, 32)
    bad = np.zeros((32, 32), dtype=bool)
    bad[:4, :4] = True
    records = [
        DetectionRecord("good", [Detection(0, 0.9, ATTACK, good)], attack_box=ATTACK, target_class=0),
        DetectionRecord("bad", [Detection(0, 0.9, ATTACK, bad)], attack_box=ATTACK, target_class=0),
    ]
    assert asr_detection(records, segmentation=True) == 0.5
    assert asr_detection(records) == 1.0


def _map_fixture() -> List[DetectionRecord]:
    a, b, c = Box(10, 10, 4, 4), Box(30, 30, 4, 4), Box(10, 10, 4, 4)
    return [
        DetectionRecord(
            "a",
            [Detection(0, 0.9, a), Detection(1, 0.6, b)],
            [GroundTruth(0, a), GroundTruth(1, b)],
        ),
        DetectionRecord(
            "b",
            [Detection(0, 0.8, Box(40, 40, 4, 4)), Detection(0, 0.7, c)],
            [GroundTruth(0, c)],
        ),
    ]


def test_map_two_classes() -> None:
    """Expect the mean of per-class all-point AP."""
    # class 0 ranks TP, FP, TP over 2 objects: recall 0.5 at precision 1,
    # then recall 1 at precision 2/3; class 1 is a single TP.
    want = (0.5 * 1 + 0.5 * (2 / 3) + 1.0) / 2
    have = mean_average_precision(_map_fixture())
    assert have == pytest.approx(want)


def test_map_order_independent() -> None:
    """Expect record and detection order not to matter."""
    records = _map_fixture()
    flipped = [DetectionRecord(r.image_id, r.detections[::-1], r.ground_truth) for r in records[::-1]]
    assert mean_average_precision(flipped) == mean_average_precision(records)


def test_map_one_match_per_object() -> None:
    """Expect a duplicate detection of the same object to be a false positive."""
    box = Box(10, 10, 4, 4)
    record = DetectionRecord("a", [Detection(0, 0.9, box), Detection(0, 0.8, box)], [GroundTruth(0, box)])
    assert mean_average_precision([record]) == 1.0
    missed = DetectionRecord("a", [Detection(0, 0.9, Box(30, 30, 4, 4)), Detection(0, 0.8, box)], [GroundTruth(0, box)])
    assert mean_average_precision([missed]) == pytest.approx(0.5)


def test_map_needs_ground_truth() -> None:
    """Expect an error without any annotated object."""
    with pytest.raises(EvaluationError):
        mean_average_precision([DetectionRecord("a", [])])


def _pair_auroc(scores: List[float], labels: List[bool]) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_auroc_f1_brute_force() -> None:
    """Expect AUROC to equal all-pairs counting and F1 to equal its counts."""
    scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.9]
    labels = [False, False, True, True, True, False]
    auroc, f1 = auroc_f1(scores, labels, 0.5)
    assert auroc == pytest.approx(_pair_auroc(scores, labels))

    tp = sum(s >= 0.5 and y for s, y in zip(scores, labels))
    fp = sum(s >= 0.5 and not y for s, y in zip(scores, labels))
    fn = sum(s < 0.5 and y for s, y in zip(scores, labels))
    assert f1 == pytest.approx(2 * tp / (2 * tp + fp + fn))


def test_auroc_constant_scores() -> None:
    """Expect ties to average to 0.5."""
    assert auroc_f1([0.3] * 4, [True, False, True, False], 0.5)[0] == 0.5


def test_auroc_single_class() -> None:
    """Expect AUROC to be undefined while F1 is still reported."""
    with pytest.raises(AurocUndefinedError) as info:
        auroc_f1([0.9, 0.7], [True, True], 0.5)
    assert info.value.f1 == 1.0


def test_report_rejects_bad_rates() -> None:
    """Expect rates outside [0, 1] to be rejected."""
    with pytest.raises(EvaluationError):
        MetricsReport(ca=71.4)


def test_report_write_read(tmp_path: Path) -> None:
    """Expect a report to be read back unchanged."""
    report = MetricsReport(ca=0.5, asr={"detection": 0.25}, counts={"detection_placements": 4})
    have = MetricsReport.read(report.write(tmp_path / "metrics" / "report.json"))
    assert report == have


def test_table_matches_reports() -> None:
    """Expect table cells to equal the report values as percentages."""
    reports = {
        "context_free": MetricsReport(ca=0.7141, asr={"classification": 0.996, "detection": 0.8125}, map=0.4817),
        "badnets": MetricsReport(ca=0.7208, asr={"classification": 0.04}),
    }
    lines = render_table(reports).splitlines()
    assert lines[0] == "| Method | CA | ASR (cls) | mAP | ASR (det) | ASR (seg) |"
    for line, (name, report) in zip(lines[2:], reports.items()):
        cells = [c.strip() for c in line.strip("|").split("|")]
        assert cells[0] == name
        want = [report.ca, report.asr.get("classification"), report.map, report.asr.get("detection")]
        for cell, value in zip(cells[1:], want):
            if value is None:
                assert cell == "-"
            else:
                assert float(cell) == pytest.approx(100 * value, abs=0.005)
        assert cells[-1] == "-"
