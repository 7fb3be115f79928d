"""Synthetic corpus: natural-ish polyline/arc images and three outline shape classes."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from compvocab.exceptions import DatasetError
from compvocab.services.dataset import Manifest, ManifestRecord, Split, save_manifest
from compvocab.utils.rng import fork_rng

logger = logging.getLogger(__name__)

Box = tuple[float, float, float, float]
Stroke = list[tuple[float, float]]

BACKGROUND = 128
INK = 230
LINE_WIDTH = 2


# ── Shapes (unit coordinates, centered, y down) ───────────────────────────────

def _arc(cx: float, cy: float, rx: float, ry: float, start: float, stop: float, steps: int = 24) -> Stroke:
    t = np.linspace(math.radians(start), math.radians(stop), steps)
    return [(cx + rx * math.cos(a), cy + ry * math.sin(a)) for a in t]


def mug() -> list[Stroke]:
    body = [(-0.35, -0.5), (-0.35, 0.5), (0.25, 0.5), (0.25, -0.5), (-0.35, -0.5)]
    handle = _arc(0.25, 0.0, 0.22, 0.25, -90, 90)
    return [body, handle]


def bracket() -> list[Stroke]:
    return [[(-0.5, -0.5), (-0.2, -0.5), (-0.2, 0.2), (0.5, 0.2), (0.5, 0.5), (-0.5, 0.5), (-0.5, -0.5)]]


def ring() -> list[Stroke]:
    def polygon(r: float, sides: int) -> Stroke:
        pts = [(r * math.cos(2 * math.pi * k / sides), r * math.sin(2 * math.pi * k / sides)) for k in range(sides)]
        return pts + pts[:1]

    return [polygon(0.5, 10), polygon(0.28, 10)]


SHAPES: dict[str, Callable[[], list[Stroke]]] = {"mug": mug, "bracket": bracket, "ring": ring}


# ── Drawing ───────────────────────────────────────────────────────────────────

def place(strokes: list[Stroke], cx: float, cy: float, size: float) -> list[Stroke]:
    return [[(cx + x * size, cy + y * size) for x, y in s] for s in strokes]


def stroke_box(strokes: list[Stroke], pad: float = LINE_WIDTH / 2) -> Box:
    pts = np.array([p for s in strokes for p in s])
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    return (float(x0 - pad), float(y0 - pad), float(x1 + pad), float(y1 + pad))


def draw_strokes(draw: ImageDraw.ImageDraw, strokes: list[Stroke], ink: int = INK, width: int = LINE_WIDTH) -> None:
    for s in strokes:
        draw.line([tuple(map(float, p)) for p in s], fill=ink, width=width)


def clutter(rng: np.random.Generator, width: int, height: int, count: int) -> list[Stroke]:
    """Random short polylines and arcs."""
    strokes = []
    for _ in range(count):
        x, y = rng.uniform(0, width), rng.uniform(0, height)
        if rng.random() < 0.5:
            pts = [(x, y)]
            for _ in range(int(rng.integers(1, 4))):
                a = rng.uniform(0, 2 * math.pi)
                step = rng.uniform(8, 30)
                x, y = x + step * math.cos(a), y + step * math.sin(a)
                pts.append((x, y))
            strokes.append(pts)
        else:
            r = rng.uniform(6, 25)
            start = rng.uniform(0, 360)
            strokes.append(_arc(x, y, r, r, start, start + rng.uniform(60, 200), 16))
    return strokes


def render(
    rng: np.random.Generator,
    width: int,
    height: int,
    objects: Sequence[tuple[str, float, float, float]] = (),
    clutter_count: int = 0,
    noise: float = 2.0,
) -> tuple[np.ndarray, list[Box]]:
    """8-bit image with clutter under the given (class, cx, cy, size) objects."""
    img = Image.new("L", (width, height), BACKGROUND)
    draw = ImageDraw.Draw(img)
    draw_strokes(draw, clutter(rng, width, height, clutter_count), ink=int(rng.integers(170, 200)))
    boxes = []
    for label, cx, cy, size in objects:
        strokes = place(SHAPES[label](), cx, cy, size)
        draw_strokes(draw, strokes)
        boxes.append(stroke_box(strokes))
    arr = np.asarray(img, dtype=np.float64)
    if noise > 0:
        arr = arr + rng.normal(0.0, noise, arr.shape)
    return np.clip(np.round(arr), 0, 255).astype(np.uint8), boxes


def natural_image(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    img, _ = render(rng, width, height, clutter_count=int(rng.integers(10, 20)))
    return img


def object_image(
    rng: np.random.Generator,
    label: str,
    width: int,
    height: int,
    size_range: tuple[float, float],
    clutter_count: int,
) -> tuple[np.ndarray, list[Box]]:
    size = rng.uniform(*size_range)
    margin = size * 0.6 + 4
    cx = rng.uniform(margin, width - margin)
    cy = rng.uniform(margin, height - margin)
    return render(rng, width, height, [(label, cx, cy, size)], clutter_count)


# ── Corpus ────────────────────────────────────────────────────────────────────

def generate_corpus(
    out_dir: str | Path,
    classes: int = 3,
    natural: int = 200,
    train: int = 20,
    validation: int = 10,
    test: int = 20,
    size: tuple[int, int] = (160, 160),
    object_size: tuple[float, float] = (50.0, 90.0),
    clutter_count: int = 4,
    seed: int = 0,
) -> Manifest:
    """Write PNGs plus manifest.json under `out_dir`; identical seeds give identical files."""
    if classes < 1 or classes > len(SHAPES):
        raise DatasetError(f"classes must be in 1..{len(SHAPES)}")
    labels = sorted(SHAPES)[:classes]
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    w, h = size
    records: list[ManifestRecord] = []

    rng = fork_rng(seed, "synth/natural")
    for k in range(natural):
        name = f"images/natural_{k:04d}.png"
        Image.fromarray(natural_image(rng, w, h)).save(out_dir / name)
        records.append(ManifestRecord(path=name, split=Split.NATURAL))

    for label in labels:
        for split, count in ((Split.TRAIN, train), (Split.VALIDATION, validation), (Split.TEST, test)):
            rng = fork_rng(seed, f"synth/{label}/{split.value}")
            for k in range(count):
                img, boxes = object_image(rng, label, w, h, object_size, clutter_count)
                name = f"images/{label}_{split.value}_{k:04d}.png"
                Image.fromarray(img).save(out_dir / name)
                records.append(ManifestRecord(path=name, label=label, boxes=boxes, split=split))

    manifest = Manifest(records=records)
    save_manifest(manifest, out_dir / "manifest.json")
    logger.info("Synthetic corpus in %s: %d images, classes %s", out_dir, len(records), labels)
    return manifest
