"""Greedy detection matching, FPPI / recall@EER curves and F-measure."""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field

from compvocab.config import settings
from compvocab.exceptions import EvaluationError
from compvocab.services.detection import Box, Detection, iou, nms

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImageTruth:
    image_id: str
    boxes: tuple[tuple[str, Box], ...]  # (label, box)


@dataclass
class CurvePoint:
    threshold: float | None  # None marks the empty-detector start point
    recall: float
    precision: float
    fppi: float
    true_positives: int
    false_positives: int


@dataclass
class ClassReport:
    label: str
    num_truths: int
    num_detections: int
    recall_at_eer: float
    rate_at_fppi: float
    curve: list[CurvePoint] = field(default_factory=list)


@dataclass
class EvalReport:
    iou_threshold: float
    fppi_target: float
    num_images: int
    classes: dict[str, ClassReport] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def greedy_match(
    ranked: Sequence[tuple[str, Box]],
    truths: Mapping[str, Sequence[Box]],
    iou_threshold: float,
) -> list[bool]:
    """TP flags for detections already sorted by descending score.

    Each detection takes the unmatched truth in its image with the highest IoU;
    every truth is matched at most once.
    """
    used: dict[str, set[int]] = {k: set() for k in truths}
    flags = []
    for image_id, box in ranked:
        best, best_j = iou_threshold, -1
        for j, truth in enumerate(truths.get(image_id, ())):
            if j in used[image_id]:
                continue
            o = iou(box, truth)
            if o >= best and (best_j < 0 or o > best):
                best, best_j = o, j
        if best_j >= 0:
            used[image_id].add(best_j)
        flags.append(best_j >= 0)
    return flags


def build_curve(scores: Sequence[float], flags: Sequence[bool], num_truths: int, num_images: int) -> list[CurvePoint]:
    curve = [CurvePoint(None, 0.0, 1.0, 0.0, 0, 0)]
    tp = fp = 0
    for i, (s, hit) in enumerate(zip(scores, flags)):
        tp += hit
        fp += not hit
        if i + 1 < len(scores) and scores[i + 1] == s:
            continue  # emit one point per distinct threshold
        curve.append(CurvePoint(
            float(s),
            tp / num_truths if num_truths else 0.0,
            tp / (tp + fp),
            fp / num_images if num_images else 0.0,
            tp, fp,
        ))
    return curve


def recall_at_eer(curve: Sequence[CurvePoint]) -> float:
    """Recall where recall - precision changes sign, linearly interpolated."""
    prev = curve[0]
    for cur in curve[1:]:
        d0 = prev.recall - prev.precision
        d1 = cur.recall - cur.precision
        if d1 >= 0 > d0:
            t = d0 / (d0 - d1)
            return prev.recall + t * (cur.recall - prev.recall)
        prev = cur
    return curve[-1].recall


def rate_at_fppi(curve: Sequence[CurvePoint], target: float) -> float:
    return max((p.recall for p in curve if p.fppi <= target), default=0.0)


def evaluate(
    detections: Mapping[str, Sequence[Detection]],
    ground_truth: Sequence[ImageTruth],
    iou_threshold: float | None = None,
    fppi_target: float | None = None,
) -> EvalReport:
    cfg = settings.detection
    iou_threshold = cfg.iou_threshold if iou_threshold is None else iou_threshold
    fppi_target = cfg.fppi_target if fppi_target is None else fppi_target
    ids = [g.image_id for g in ground_truth]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise EvaluationError(f"duplicate ground-truth image ids: {dup[:5]}")
    unknown = sorted(set(detections) - set(ids))
    if unknown:
        raise EvaluationError(f"detections for images without ground truth: {unknown[:5]}")

    labels = sorted(
        {label for g in ground_truth for label, _ in g.boxes}
        | {d.label for dets in detections.values() for d in dets}
    )
    report = EvalReport(iou_threshold, fppi_target, len(ids))
    for label in labels:
        truths = {g.image_id: [b for lab, b in g.boxes if lab == label] for g in ground_truth}
        num_truths = sum(len(v) for v in truths.values())
        ranked = sorted(
            ((d.score, image_id, d.box) for image_id, dets in detections.items() for d in dets if d.label == label),
            key=lambda t: (-t[0], t[1], t[2]),
        )
        flags = greedy_match([(i, b) for _, i, b in ranked], truths, iou_threshold)
        curve = build_curve([s for s, _, _ in ranked], flags, num_truths, len(ids))
        report.classes[label] = ClassReport(
            label=label,
            num_truths=num_truths,
            num_detections=len(ranked),
            recall_at_eer=recall_at_eer(curve),
            rate_at_fppi=rate_at_fppi(curve, fppi_target),
            curve=curve,
        )
        logger.info(
            "%s: recall@EER %.3f, rate@%.2f FPPI %.3f (%d truths, %d detections)",
            label, report.classes[label].recall_at_eer, fppi_target,
            report.classes[label].rate_at_fppi, num_truths, len(ranked),
        )
    return report


def best_f_measure(
    detections: Sequence[Sequence[tuple[float, Box]]],
    truths: Sequence[Sequence[Box]],
    iou_threshold: float,
    nms_iou: float,
) -> float:
    """Best F-measure over score thresholds; detections are NMS'd per image."""
    num_truths = sum(len(t) for t in truths)
    if not num_truths:
        return 0.0
    ranked = []
    for i, dets in enumerate(detections):
        keep = nms([b for _, b in dets], [s for s, _ in dets], nms_iou)
        ranked.extend((dets[k][0], str(i), dets[k][1]) for k in keep)
    ranked.sort(key=lambda t: (-t[0], t[1], t[2]))
    gt = {str(i): list(t) for i, t in enumerate(truths)}
    flags = greedy_match([(i, b) for _, i, b in ranked], gt, iou_threshold)
    best = tp = 0.0
    for k, hit in enumerate(flags, start=1):
        tp += hit
        if not tp:
            continue
        precision, recall = tp / k, tp / num_truths
        best = max(best, 2 * precision * recall / (precision + recall))
    return best if math.isfinite(best) else 0.0
