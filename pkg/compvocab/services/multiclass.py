"""Incremental multi-class training, per-composition thresholds and deg_share."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from compvocab.config import LearningSettings, settings
from compvocab.exceptions import EvaluationError, LearningError
from compvocab.services.dataset import ClassDataset, LabeledImage, crop_and_rescale, normalize_scale
from compvocab.services.detection import iou
from compvocab.services.features import FeatureSet, extract_features
from compvocab.services.inference import (
    InferenceGraph,
    StateRef,
    bounding_box,
    extend_graph,
    infer,
    parse_graph,
    support,
    truncate_graph,
)
from compvocab.services.or_learning import (
    build_or_layer,
    collect_or_samples,
    provisional_or_nodes,
    replace_or_nodes,
)
from compvocab.services.param_learning import (
    apply_layer1,
    estimate_layer1_params,
    estimate_object_appearance,
    reestimate_geometry,
)
from compvocab.services.structure_learning import (
    ValidationImage,
    learn_layer,
    propose_object_compositions,
    select_object_layer,
)
from compvocab.services.vocabulary import Composition, Vocabulary, layer1_default
from compvocab.utils.io import parallel_map
from compvocab.utils.rng import fork_rng

logger = logging.getLogger(__name__)

Box = tuple[float, float, float, float]
Featurize = Callable[[np.ndarray], FeatureSet]

GENERIC_LAYERS = (2, 3)


@dataclass
class LayerReport:
    layer: int
    added: list[int] = field(default_factory=list)
    reused: list[int] = field(default_factory=list)
    or_nodes: list[int] = field(default_factory=list)
    objective: float = 0.0
    em_history: list[float] = field(default_factory=list)


@dataclass
class TrainingReport:
    label: str | None
    layers: list[LayerReport] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "layers": [vars(layer) for layer in self.layers],
        }


def _featurize_all(images: Sequence[np.ndarray], featurize: Featurize | None) -> list[FeatureSet]:
    return parallel_map(featurize or extract_features, images, settings.workers)


def _graphs(vocab: Vocabulary, features: Sequence[FeatureSet], depth: int) -> list[InferenceGraph]:
    return parallel_map(lambda f: infer(None, vocab, depth, features=f), features, settings.workers)


def _rebuild(graphs: Sequence[InferenceGraph], vocab: Vocabulary, layer_idx: int) -> None:
    for g in graphs:
        truncate_graph(g, layer_idx - 1)
        extend_graph(g, vocab, layer_idx)


def grow_layer(
    vocab: Vocabulary,
    graphs: Sequence[InferenceGraph],
    layer_idx: int,
    rng: np.random.Generator,
    regions: Sequence[Sequence[Box] | None] | None = None,
    cfg: LearningSettings | None = None,
    artifacts_dir: str | Path | None = None,
) -> LayerReport:
    """Structure, geometry and OR nodes of one layer; graphs end up built to it."""
    cfg = cfg or settings.learning
    for g in graphs:
        extend_graph(g, vocab, layer_idx - 1)
    result = learn_layer(vocab, graphs, layer_idx, rng, regions, cfg, artifacts_dir)
    report = LayerReport(layer_idx, reused=result.reused, objective=result.final_objective)
    if result.compositions:
        new_ids = [c.id for c in result.compositions]
        provisional = provisional_or_nodes(result.compositions, vocab.next_or_id())
        vocab.add_compositions(layer_idx, result.compositions, provisional)
        em = reestimate_geometry(vocab, layer_idx, graphs, compositions=new_ids, cfg=cfg)
        report.em_history = em.history
        _rebuild(graphs, vocab, layer_idx)
        samples = collect_or_samples(vocab, layer_idx, graphs, new_ids, cfg.or_samples)
        ors = build_or_layer(
            vocab, layer_idx, samples, cfg.or_cutoff,
            first_or_id=provisional[0].id, compositions=new_ids, cfg=cfg,
        )
        replace_or_nodes(vocab, layer_idx, [o.id for o in provisional], ors)
        report.added = new_ids
        report.or_nodes = [o.id for o in ors]
    _rebuild(graphs, vocab, layer_idx)
    return report


# ── Generic layers ────────────────────────────────────────────────────────────

def learn_generic(
    feature_sets: Sequence[FeatureSet],
    vocab: Vocabulary | None = None,
    seed: int | None = None,
    cfg: LearningSettings | None = None,
    artifacts_dir: str | Path | None = None,
) -> tuple[Vocabulary, TrainingReport]:
    """Layer-1 parameters and layers 2-3 from unlabeled images."""
    if not feature_sets:
        raise LearningError("generic learning needs at least one image")
    seed = settings.seed if seed is None else seed
    n = feature_sets[0].num_orientations
    vocab = vocab or layer1_default(n)
    apply_layer1(vocab, estimate_layer1_params(feature_sets, n, cfg))
    report = TrainingReport(None)
    graphs = _graphs(vocab, feature_sets, 1)
    for layer_idx in GENERIC_LAYERS:
        if layer_idx >= vocab.object_layer:
            break
        report.layers.append(grow_layer(
            vocab, graphs, layer_idx, fork_rng(seed, f"generic/{layer_idx}"), cfg=cfg, artifacts_dir=artifacts_dir,
        ))
    logger.info("Generic vocabulary: %s", [len(vocab.layer(k).compositions) for k in range(1, vocab.depth + 1)])
    return vocab, report


def learn_single_layer(
    vocab: Vocabulary,
    feature_sets: Sequence[FeatureSet],
    layer_idx: int,
    seed: int | None = None,
    cfg: LearningSettings | None = None,
    artifacts_dir: str | Path | None = None,
) -> LayerReport:
    """Grow one generic layer on top of an existing vocabulary."""
    if not feature_sets:
        raise LearningError("layer learning needs at least one image")
    if not 2 <= layer_idx <= vocab.depth + 1 or layer_idx >= vocab.object_layer:
        raise LearningError(f"cannot learn layer {layer_idx} on a vocabulary of depth {vocab.depth}")
    if not all(c.estimated for c in vocab.layer(1).compositions):
        apply_layer1(vocab, estimate_layer1_params(feature_sets, vocab.num_orientations, cfg))
    seed = settings.seed if seed is None else seed
    graphs = _graphs(vocab, feature_sets, layer_idx - 1)
    return grow_layer(vocab, graphs, layer_idx, fork_rng(seed, f"generic/{layer_idx}"), cfg=cfg, artifacts_dir=artifacts_dir)


# ── Class layers ──────────────────────────────────────────────────────────────

def training_crops(dataset: ClassDataset, cfg: LearningSettings | None = None) -> list[LabeledImage]:
    cfg = cfg or settings.learning
    crops = []
    for item in dataset.positives:
        for k, box in enumerate(item.boxes):
            crop, local = crop_and_rescale(item.image, box, cfg.box_diagonal, cfg.box_margin)
            crops.append(LabeledImage(crop, [local], f"{item.image_id}#{k}"))
    return crops


def learn_class(
    vocab: Vocabulary,
    dataset: ClassDataset,
    seed: int | None = None,
    featurize: Featurize | None = None,
    cfg: LearningSettings | None = None,
) -> TrainingReport:
    """Append one class: layers 4..O-1 inside the boxes, object layer, class entry."""
    cfg = cfg or settings.learning
    seed = settings.seed if seed is None else seed
    label = dataset.label
    if label in vocab.class_layer:
        raise LearningError(f"class {label!r} already in the vocabulary")
    if vocab.depth < max(GENERIC_LAYERS) or not all(c.estimated for c in vocab.layer(1).compositions):
        raise LearningError("learn the generic layers before adding classes")
    crops = training_crops(dataset, cfg)
    if not crops:
        raise LearningError(f"class {label!r} has no positive boxes")
    top = vocab.object_layer
    report = TrainingReport(label)

    graphs = _graphs(vocab, _featurize_all([c.image for c in crops], featurize), max(GENERIC_LAYERS))
    regions = [c.boxes for c in crops]
    for layer_idx in range(max(GENERIC_LAYERS) + 1, top):
        rng = fork_rng(seed, f"class/{label}/{layer_idx}")
        report.layers.append(grow_layer(vocab, graphs, layer_idx, rng, regions, cfg))

    for g in graphs:
        extend_graph(g, vocab, top - 1)
    candidates = propose_object_compositions(vocab, graphs, fork_rng(seed, f"class/{label}/{top}"), regions, cfg)
    validation = _validation_images(vocab, dataset, featurize)
    if not any(v.boxes for v in validation):
        validation = [ValidationImage(g, c.boxes) for g, c in zip(graphs, crops)]
        logger.warning("Class %s has no validation boxes; selecting on training crops", label)
    chosen = select_object_layer(candidates, validation, vocab.layer(top).threshold, cfg) if candidates else []
    if not chosen and candidates:
        chosen = [candidates[0]]
        logger.warning("Class %s: no candidate improved the F-measure; keeping the best-covering one", label)
    if not chosen:
        raise LearningError(f"no object-layer candidates for class {label!r}")

    existing_ids = {c.id for c in vocab.layer(top).compositions}
    reused = sorted(c.id for c in chosen if c.id in existing_ids)
    fresh = sorted((c for c in chosen if c.id not in existing_ids), key=lambda c: c.id)
    first = vocab.next_composition_id()
    for k, comp in enumerate(fresh):
        comp.id = first + k
    layer_report = LayerReport(top, added=[c.id for c in fresh], reused=reused)
    if fresh:
        ors = provisional_or_nodes(fresh, vocab.next_or_id())
        vocab.add_compositions(top, fresh, ors)
        layer_report.or_nodes = [o.id for o in ors]
        em = reestimate_geometry(vocab, top, graphs, compositions=layer_report.added, cfg=cfg)
        layer_report.em_history = em.history
        _rebuild(graphs, vocab, top)
        estimate_object_appearance(vocab, graphs, cfg.appearance_iou, compositions=layer_report.added)
    report.layers.append(layer_report)
    vocab.class_layer[label] = sorted(reused + layer_report.added)
    logger.info("Class %s learned: object compositions %s", label, vocab.class_layer[label])
    return report


def _validation_images(vocab: Vocabulary, dataset: ClassDataset, featurize: Featurize | None) -> list[ValidationImage]:
    scaled = [normalize_scale(v.image, v.boxes) for v in dataset.validation]
    feats = _featurize_all([img for img, _, _ in scaled], featurize)
    graphs = _graphs(vocab, feats, vocab.object_layer - 1)
    return [ValidationImage(g, boxes) for g, (_, boxes, _) in zip(graphs, scaled)]


def learn_incremental(
    natural: Sequence[FeatureSet],
    datasets: Sequence[ClassDataset],
    seed: int | None = None,
    featurize: Featurize | None = None,
    cfg: LearningSettings | None = None,
) -> tuple[Vocabulary, list[TrainingReport]]:
    vocab, generic = learn_generic(natural, seed=seed, cfg=cfg)
    reports = [generic]
    for dataset in datasets:
        if not dataset.positives:
            raise LearningError(f"class {dataset.label!r} has an empty dataset")
        reports.append(learn_class(vocab, dataset, seed, featurize, cfg))
    return vocab, reports


# ── Thresholds ────────────────────────────────────────────────────────────────

def positive_detections(
    graph: InferenceGraph,
    vocab: Vocabulary,
    label: str,
    boxes: Sequence[Box],
    iou_threshold: float | None = None,
    padding: float | None = None,
) -> list[StateRef]:
    """Per truth box, the top-scoring object state of `label` whose box overlaps it enough."""
    det = settings.detection
    iou_threshold = det.iou_threshold if iou_threshold is None else iou_threshold
    padding = det.box_padding if padding is None else padding
    top = graph.composed.get(vocab.object_layer)
    members = set(vocab.class_layer.get(label, ()))
    if top is None or not members:
        return []
    rows = [r for r in np.lexsort((np.arange(len(top)), -top.scores)) if int(top.nodes[r]) in members]
    found = []
    for box in boxes:
        for r in rows:
            ref = StateRef(vocab.object_layer, False, int(r))
            if iou(bounding_box(support(graph, ref), padding), box) >= iou_threshold:
                found.append(ref)
                break
    return found


def learn_thresholds(
    vocab: Vocabulary,
    datasets: Sequence[ClassDataset],
    safety_fraction: float | None = None,
    featurize: Featurize | None = None,
) -> dict[int, float]:
    """tau_omega = safety * min score of omega over all positive parse graphs."""
    safety_fraction = settings.learning.safety_fraction if safety_fraction is None else safety_fraction
    if not 0 <= safety_fraction <= 1:
        raise LearningError(f"safety fraction {safety_fraction} outside [0, 1]")
    minimum: dict[int, float] = {}
    positives = 0
    for dataset in datasets:
        crops = training_crops(dataset)
        feats = _featurize_all([c.image for c in crops], featurize)
        for crop, graph in zip(crops, _graphs(vocab, feats, vocab.object_layer)):
            for ref in positive_detections(graph, vocab, dataset.label, crop.boxes):
                positives += 1
                for node in parse_graph(graph, ref).nodes:
                    if node.pooled:
                        continue
                    state = graph.state(node)
                    minimum[state.node] = min(minimum.get(state.node, math.inf), state.score)
    if not positives:
        raise LearningError("no positive detections on the training images")
    thresholds = {cid: safety_fraction * s for cid, s in sorted(minimum.items())}
    for cid, value in thresholds.items():
        vocab.composition(cid).threshold = value
    logger.info("Thresholds learned for %d compositions from %d positives", len(thresholds), positives)
    return thresholds


# ── Sharing ───────────────────────────────────────────────────────────────────

def used_or_nodes(vocab: Vocabulary, label: str) -> set[int]:
    """OR ids reachable downward from the class's object compositions."""
    owner = {cid: oid for k in range(1, vocab.depth + 1) for cid, oid in vocab.or_of(k).items()}
    stack: list[Composition] = [vocab.composition(c) for c in vocab.class_layer[label]]
    seen_comps: set[int] = set()
    used: set[int] = set()
    while stack:
        comp = stack.pop()
        if comp.id in seen_comps:
            continue
        seen_comps.add(comp.id)
        if comp.id in owner:
            used.add(owner[comp.id])
        for part in comp.parts:
            if part.is_repulsive:
                continue
            for or_id in part.appearance.support:
                used.add(or_id)
                stack.extend(vocab.composition(m) for m in vocab.or_node(or_id).members)
    return used


def deg_share(vocab: Vocabulary, layer_idx: int) -> tuple[float, float]:
    """Mean and std over used OR nodes of (classes using it - 1) / (classes - 1)."""
    labels = vocab.classes
    if len(labels) < 2:
        raise EvaluationError("deg_share needs at least two classes")
    layer_ors = {o.id for o in vocab.layer(layer_idx).or_nodes}
    usage = {o: 0 for o in layer_ors}
    for label in labels:
        for o in used_or_nodes(vocab, label) & layer_ors:
            usage[o] += 1
    values = [(u - 1) / (len(labels) - 1) for u in usage.values() if u > 0]
    if not values:
        return 0.0, 0.0
    return float(np.mean(values)), float(np.std(values))
