"""Dataset manifest, labeled images, box-driven cropping and scale normalization."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator

from compvocab.config import settings
from compvocab.exceptions import DatasetError
from compvocab.services.features import load_image, resize_image
from compvocab.utils.io import write_json

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1

Box = tuple[float, float, float, float]


class Split(str, Enum):
    NATURAL = "natural"
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


# ── Manifest ──────────────────────────────────────────────────────────────────

class ManifestRecord(BaseModel):
    path: str
    label: str | None = None
    boxes: list[tuple[float, float, float, float]] = []
    split: Split = Split.TRAIN

    @property
    def image_id(self) -> str:
        return Path(self.path).stem

    @field_validator("boxes")
    @classmethod
    def check_boxes(cls, boxes):
        for x0, y0, x1, y1 in boxes:
            if x1 <= x0 or y1 <= y0:
                raise ValueError(f"degenerate box {(x0, y0, x1, y1)}")
        return boxes


class Manifest(BaseModel):
    version: int = MANIFEST_VERSION
    records: list[ManifestRecord] = Field(default_factory=list)

    @field_validator("version")
    @classmethod
    def check_version(cls, v):
        if v != MANIFEST_VERSION:
            raise ValueError(f"manifest version {v}, expected {MANIFEST_VERSION}")
        return v

    def select(self, split: Split | str, label: str | None = None) -> list[ManifestRecord]:
        split = Split(split)
        return [r for r in self.records if r.split is split and (label is None or r.label == label)]

    @property
    def labels(self) -> list[str]:
        return sorted({r.label for r in self.records if r.label})


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    try:
        manifest = Manifest.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    except ValidationError as exc:
        raise DatasetError(f"invalid manifest {path}: {exc}") from exc
    ids = [r.image_id for r in manifest.records]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"manifest {path} has duplicate image ids")
    logger.info("Manifest %s: %d records, classes %s", path, len(manifest.records), manifest.labels)
    return manifest


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    write_json(path, manifest.model_dump(mode="json"))


def resolve(record: ManifestRecord, root: str | Path) -> Path:
    p = Path(record.path)
    return p if p.is_absolute() else Path(root) / p


# ── Labeled images ────────────────────────────────────────────────────────────

@dataclass
class LabeledImage:
    image: np.ndarray
    boxes: list[Box] = field(default_factory=list)
    image_id: str = ""


@dataclass
class ClassDataset:
    label: str
    positives: list[LabeledImage]
    validation: list[LabeledImage]


def read_records(records: Sequence[ManifestRecord], root: str | Path) -> list[LabeledImage]:
    return [
        LabeledImage(load_image(resolve(r, root)), [tuple(b) for b in r.boxes], r.image_id)
        for r in records
    ]


def class_dataset(manifest: Manifest, label: str, root: str | Path) -> ClassDataset:
    positives = read_records(manifest.select(Split.TRAIN, label), root)
    if not positives or not any(p.boxes for p in positives):
        raise DatasetError(f"class {label!r} has no training boxes")
    return ClassDataset(label, positives, read_records(manifest.select(Split.VALIDATION, label), root))


# ── Geometry ──────────────────────────────────────────────────────────────────

def box_diagonal(box: Box) -> float:
    x0, y0, x1, y1 = box
    return math.hypot(x1 - x0, y1 - y0)


def crop_and_rescale(
    image: np.ndarray,
    box: Box,
    diagonal: float | None = None,
    margin: float | None = None,
) -> tuple[np.ndarray, Box]:
    """Crop around `box` with a relative margin and rescale so its diagonal is `diagonal` px.

    Returns the crop and the box in crop coordinates.
    """
    cfg = settings.learning
    diagonal = cfg.box_diagonal if diagonal is None else diagonal
    margin = cfg.box_margin if margin is None else margin
    h, w = image.shape[:2]
    x0, y0, x1, y1 = box
    mx, my = (x1 - x0) * margin, (y1 - y0) * margin
    cx0, cy0 = max(0, math.floor(x0 - mx)), max(0, math.floor(y0 - my))
    cx1, cy1 = min(w, math.ceil(x1 + mx)), min(h, math.ceil(y1 + my))
    if cx1 <= cx0 or cy1 <= cy0:
        raise DatasetError(f"box {box} lies outside the {w}x{h} image")
    crop = image[cy0:cy1, cx0:cx1]
    s = diagonal / box_diagonal(box)
    out = resize_image(crop, max(1, round(crop.shape[1] * s)), max(1, round(crop.shape[0] * s)))
    sx, sy = out.shape[1] / crop.shape[1], out.shape[0] / crop.shape[0]
    return out, ((x0 - cx0) * sx, (y0 - cy0) * sy, (x1 - cx0) * sx, (y1 - cy0) * sy)


def normalize_scale(image: np.ndarray, boxes: Sequence[Box], diagonal: float | None = None) -> tuple[np.ndarray, list[Box], float]:
    """Rescale the whole image so the mean box diagonal is `diagonal` px."""
    diagonal = settings.learning.box_diagonal if diagonal is None else diagonal
    if not boxes:
        return image, [], 1.0
    s = diagonal / float(np.mean([box_diagonal(b) for b in boxes]))
    h, w = image.shape[:2]
    out = resize_image(image, max(1, round(w * s)), max(1, round(h * s)))
    sx, sy = out.shape[1] / w, out.shape[0] / h
    return out, [(x0 * sx, y0 * sy, x1 * sx, y1 * sy) for x0, y0, x1, y1 in boxes], s
