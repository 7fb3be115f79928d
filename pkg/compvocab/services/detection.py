"""Multi-scale detection, box overlap, cross-class NMS, classification vectors."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from compvocab.config import DetectionSettings, settings
from compvocab.exceptions import EvaluationError
from compvocab.services.features import FeatureSet, GaborBankConfig, build_pyramid, resize_image, to_grayscale
from compvocab.services.inference import (
    InferenceGraph,
    StateRef,
    bounding_box,
    infer,
    infer_class_layer,
    support,
)
from compvocab.services.vocabulary import Vocabulary
from compvocab.utils.io import atomic_write

logger = logging.getLogger(__name__)

Box = tuple[float, float, float, float]
Featurize = Callable[[np.ndarray], FeatureSet]


@dataclass(frozen=True)
class Detection:
    label: str
    box: Box  # x0, y0, x1, y1 in original image pixels
    score: float
    scale_index: int = 0

    @property
    def sort_key(self) -> tuple:
        return (-self.score, self.label, self.box)


def iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    area_a = max(0.0, ax1 - ax0) * max(0.0, ay1 - ay0)
    area_b = max(0.0, bx1 - bx0) * max(0.0, by1 - by0)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def nms(boxes: Sequence[Box], scores: Sequence[float], threshold: float) -> list[int]:
    """Greedy suppression by descending score; drops boxes with IoU > threshold."""
    if not len(boxes):
        return []
    dets = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    x1, y1, x2, y2 = dets[:, 0], dets[:, 1], dets[:, 2], dets[:, 3]
    areas = np.maximum(0.0, x2 - x1) * np.maximum(0.0, y2 - y1)
    order = np.lexsort((np.arange(len(scores)), -scores))

    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        xx1 = np.maximum(x1[i], x1[order[1:]])
        yy1 = np.maximum(y1[i], y1[order[1:]])
        xx2 = np.minimum(x2[i], x2[order[1:]])
        yy2 = np.minimum(y2[i], y2[order[1:]])
        inter = np.maximum(0.0, xx2 - xx1) * np.maximum(0.0, yy2 - yy1)
        union = areas[i] + areas[order[1:]] - inter
        ovr = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        order = order[1:][ovr <= threshold]
    return keep


def _clamp(box: Box, width: float, height: float) -> Box:
    x0, y0, x1, y1 = box
    return (
        min(max(x0, 0.0), width), min(max(y0, 0.0), height),
        min(max(x1, 0.0), width), min(max(y1, 0.0), height),
    )


def detect_graph(
    graph: InferenceGraph,
    vocab: Vocabulary,
    sx: float = 1.0,
    sy: float = 1.0,
    bounds: tuple[float, float] | None = None,
    scale_index: int = 0,
    padding: float | None = None,
) -> list[Detection]:
    """Class-layer detections of one graph, boxes scaled by (sx, sy)."""
    padding = settings.detection.box_padding if padding is None else padding
    labels, states = infer_class_layer(graph, vocab)
    width, height = bounds or (graph.width * sx, graph.height * sy)
    out = []
    for r in range(len(states)):
        top_row = int(states.child_rows(r)[0])
        x0, y0, x1, y1 = bounding_box(support(graph, StateRef(vocab.object_layer, False, top_row)), padding)
        box = _clamp((x0 * sx, y0 * sy, x1 * sx, y1 * sy), width, height)
        out.append(Detection(labels[int(states.nodes[r])], box, float(states.scores[r]), scale_index))
    return out


def detect(
    image: np.ndarray,
    vocab: Vocabulary,
    cfg: DetectionSettings | None = None,
    bank: GaborBankConfig | None = None,
    featurize: Featurize | None = None,
) -> list[Detection]:
    """Upscale, scan the pyramid, map boxes back to `image` and suppress across classes.

    `featurize` replaces plain feature extraction per pyramid level (a feature cache, say).
    """
    cfg = cfg or settings.detection
    if not vocab.class_layer or vocab.depth < vocab.object_layer:
        logger.warning("Vocabulary has no class layer; no detections")
        return []
    image = to_grayscale(image)
    orig_h, orig_w = image.shape
    work = image
    if cfg.upscale != 1:
        work = resize_image(image, round(orig_w * cfg.upscale), round(orig_h * cfg.upscale))
    bank = bank or GaborBankConfig.from_settings()
    side = 2 * bank.radius + 1
    found: list[Detection] = []
    for level, img in enumerate(build_pyramid(work, levels=cfg.levels)):
        if min(img.shape) < side:
            break
        features = featurize(img) if featurize is not None else None
        graph = infer(img, vocab, vocab.object_layer, features=features, bank=bank)
        found.extend(detect_graph(
            graph, vocab,
            sx=orig_w / img.shape[1], sy=orig_h / img.shape[0],
            bounds=(float(orig_w), float(orig_h)), scale_index=level, padding=cfg.box_padding,
        ))
    found.sort(key=lambda d: d.sort_key)
    keep = nms([d.box for d in found], [d.score for d in found], cfg.nms_iou)
    result = sorted((found[i] for i in keep), key=lambda d: d.sort_key)
    logger.debug("Detected %d objects (%d before suppression)", len(result), len(found))
    return result


# ── Classification vectors ────────────────────────────────────────────────────

def classification_features(
    graph: InferenceGraph,
    vocab: Vocabulary,
    layer: int | None = None,
    angular: int | None = None,
    radial: int | None = None,
) -> np.ndarray:
    """Summed Z-bar^l scores per (radial cell, angular cell, OR node)."""
    cfg = settings.detection
    layer = cfg.classification_layer if layer is None else layer
    angular = cfg.angular_cells if angular is None else angular
    radial = cfg.radial_cells if radial is None else radial
    or_ids = sorted(o.id for o in vocab.layer(layer).or_nodes)
    slot = {o: k for k, o in enumerate(or_ids)}
    vec = np.zeros(angular * radial * len(or_ids))
    table = graph.pooled.get(layer)
    if table is None or not len(table) or not or_ids:
        return vec
    cx, cy = graph.width / 2.0, graph.height / 2.0
    half_diag = math.hypot(graph.width, graph.height) / 2.0
    px, py = graph.to_pixels(layer, table.xs.astype(np.float64), table.ys.astype(np.float64))
    dx, dy = px - cx, py - cy
    ang = np.floor(np.mod(np.arctan2(dy, dx), 2 * math.pi) / (2 * math.pi / angular)).astype(np.int64) % angular
    dist = np.hypot(dx, dy)
    rad = np.minimum(np.floor(dist / (half_diag / radial)).astype(np.int64), radial - 1)
    cells = rad * angular + ang
    k = np.array([slot[int(o)] for o in table.nodes], dtype=np.int64)
    np.add.at(vec, cells * len(or_ids) + k, table.scores)
    return vec


def classification_vector(
    image: np.ndarray,
    vocab: Vocabulary,
    layer: int | None = None,
    scales: int | None = None,
) -> np.ndarray:
    """Sum of classification features over image scales spaced sqrt(2) apart."""
    cfg = settings.detection
    layer = cfg.classification_layer if layer is None else layer
    scales = cfg.classification_scales if scales is None else scales
    image = to_grayscale(image)
    pyramid = build_pyramid(image, scales_per_octave=2, levels=scales)
    total = None
    for img in pyramid:
        vec = classification_features(infer(img, vocab, layer), vocab, layer)
        total = vec if total is None else total + vec
    return total


# ── Detection files ───────────────────────────────────────────────────────────

def write_detections(path: str | Path, per_image: dict[str, list[Detection]]) -> None:
    """One record per line: image id, class, x0, y0, x1, y1, score."""
    with atomic_write(path) as fh:
        for image_id in sorted(per_image):
            for d in per_image[image_id]:
                x0, y0, x1, y1 = d.box
                fh.write(f"{image_id}\t{d.label}\t{x0:.3f}\t{y0:.3f}\t{x1:.3f}\t{y1:.3f}\t{d.score:.9f}\t{d.scale_index}\n")


def read_detections(path: str | Path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise EvaluationError(f"cannot read detections {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) not in (7, 8):
            raise EvaluationError(f"{path}:{lineno}: expected 7 or 8 fields, got {len(fields)}")
        image_id, label, *nums = fields
        try:
            x0, y0, x1, y1, score = (float(v) for v in nums[:5])
            scale = int(nums[5]) if len(nums) > 5 else 0
        except ValueError as exc:
            raise EvaluationError(f"{path}:{lineno}: {exc}") from exc
        out.setdefault(image_id, []).append(Detection(label, (x0, y0, x1, y1), score, scale))
    return out
