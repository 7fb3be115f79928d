"""Shared fixtures: isolated settings/storage, toy vocabularies, hand-built graphs."""

from __future__ import annotations

import numpy as np
import pytest
from PIL import Image, ImageDraw

from compvocab.config import apply_settings, load_settings, settings
from compvocab.services.dataset import ClassDataset, LabeledImage
from compvocab.services.features import FeatureSet
from compvocab.services.inference import InferenceGraph, StateTable, downsample, pool_or
from compvocab.services.vocabulary import (
    AppearanceParam,
    Composition,
    GeometryParam,
    ORComposition,
    Part,
    Vocabulary,
    layer1_default,
    reference_part,
)


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Every test gets its own cache dir and SQLite file; the singleton is restored after."""
    saved = settings.model_copy(deep=True)
    monkeypatch.setenv("COMPVOCAB_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.setenv("COMPVOCAB_DATABASE_URL", f"sqlite:///{tmp_path / 'compvocab.db'}")
    apply_settings(load_settings())
    yield settings
    apply_settings(saved)


# ── Images ────────────────────────────────────────────────────────────────────

def draw_image(width: int, height: int, lines, background: int = 0, ink: int = 255, width_px: int = 2) -> np.ndarray:
    """Grayscale float image in [0, 1] with the given polylines drawn on it."""
    img = Image.new("L", (width, height), background)
    draw = ImageDraw.Draw(img)
    for line in lines:
        draw.line(line, fill=ink, width=width_px)
    return np.asarray(img, dtype=np.float64) / 255.0


@pytest.fixture
def vertical_line_image() -> np.ndarray:
    return draw_image(80, 80, [[(40, 10), (40, 70)]])


# ── Vocabularies ──────────────────────────────────────────────────────────────

def estimated_layer1(n: int = 3, object_layer: int = 6) -> Vocabulary:
    vocab = layer1_default(n)
    vocab.object_layer = object_layer
    for comp in vocab.layer(1).compositions:
        comp.estimated = True
    return vocab


def add_composition(
    vocab: Vocabulary,
    layer_idx: int,
    comp_id: int,
    or_id: int,
    ref_or: int,
    parts: list[tuple[int, tuple[float, float], float]] = (),
) -> Composition:
    """Composition with a reference part on `ref_or` plus (or, mean, variance) parts, in its own OR node."""
    comp = Composition(
        comp_id,
        layer_idx,
        [reference_part(ref_or)]
        + [Part(AppearanceParam.one_hot(o), GeometryParam.isotropic(mean, var)) for o, mean, var in parts],
    )
    vocab.add_compositions(layer_idx, [comp], [ORComposition(or_id, layer_idx, (comp_id,))])
    return comp


@pytest.fixture
def two_class_vocab() -> Vocabulary:
    """Three layers, object layer 3, classes a and b sharing layer-1 OR 1."""
    vocab = estimated_layer1(3, object_layer=3)
    add_composition(vocab, 2, 10, 20, ref_or=0, parts=[(1, (4.0, 0.0), 1.0)])
    add_composition(vocab, 2, 11, 21, ref_or=1, parts=[(2, (0.0, 4.0), 1.0)])
    add_composition(vocab, 3, 30, 40, ref_or=20)
    add_composition(vocab, 3, 31, 41, ref_or=21)
    vocab.class_layer = {"a": [30], "b": [31]}
    return vocab


# ── Graphs ────────────────────────────────────────────────────────────────────

def graph_from_points(vocab: Vocabulary, points, width: int, height: int) -> InferenceGraph:
    """Graph whose layer 1 holds the given (layer-1 composition id, x, y, score) states."""
    arr = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    states = StateTable.build(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])
    graph = InferenceGraph(width, height)
    graph.shapes[1] = (height, width)
    graph.scales[1] = 1.0
    graph.composed[1] = downsample(states, 1.0)
    graph.pooled[1] = pool_or(graph.composed[1], vocab, 1)
    return graph


# ── Corner-pair object ────────────────────────────────────────────────────────

# 36 x 27 box, diagonal 45: with box_diagonal 45 and no margin the crop is the box itself
CORNER_BOX = (10.0, 10.0, 46.0, 37.0)


def corner_vocab() -> Vocabulary:
    """Generic layers 1-3 passing orientations 0 and 1 up as OR 40 and OR 41; object layer 4."""
    vocab = estimated_layer1(3, object_layer=4)
    for comp in vocab.layer(1).compositions:
        comp.set_layer1(np.eye(3)[comp.id], 0.05 * np.eye(3))
    add_composition(vocab, 2, 10, 20, ref_or=0)
    add_composition(vocab, 2, 11, 21, ref_or=1)
    add_composition(vocab, 3, 30, 40, ref_or=20)
    add_composition(vocab, 3, 31, 41, ref_or=21)
    return vocab


def corner_features(image: np.ndarray) -> FeatureSet:
    """Orientation 0 two pixels in from the top-left corner, orientation 1 three in from the bottom-right."""
    h, w = image.shape[:2]
    locations = np.array([[2, 2], [w - 3, h - 3]], dtype=np.int64)
    return FeatureSet(locations, np.eye(3)[:2], w, h)


def corner_dataset(label: str, count: int = 4) -> ClassDataset:
    positives = [LabeledImage(np.zeros((64, 64)), [CORNER_BOX], f"{label}{k}") for k in range(count)]
    return ClassDataset(label, positives, [])


@pytest.fixture
def corner_settings(isolated_settings):
    isolated_settings.learning.box_diagonal = 45.0
    isolated_settings.learning.box_margin = 0.0
    # four crops give a smoothed histogram peak of 1
    isolated_settings.learning.mode_min_count = 0.5
    return isolated_settings
