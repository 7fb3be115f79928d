"""Layer-1 Gaussian estimation, EM-like geometry refits, object-layer appearance."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from compvocab.config import LearningSettings, settings
from compvocab.exceptions import LearningError
from compvocab.services.features import FeatureSet
from compvocab.services.inference import InferenceGraph, LayerIndex, StateRef, score_anchors, support
from compvocab.services.structure_learning import regularize_covariance, support_iou
from compvocab.services.vocabulary import AppearanceParam, GeometryParam, Part, Vocabulary, canonical_parts

logger = logging.getLogger(__name__)

# Chebyshev radius (in layer O-1 cells) for co-located alternatives
_COLOCATED = 2


# ── Layer 1 ───────────────────────────────────────────────────────────────────

@dataclass
class Layer1Fit:
    orientation: int
    count: int
    mean: np.ndarray
    cov: np.ndarray
    from_prior: bool


def _fsum_stack(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise compensated sum; independent of the order images arrive in."""
    shape = arrays[0].shape
    flat = np.stack([a.ravel() for a in arrays], axis=1)
    return np.array([math.fsum(row) for row in flat]).reshape(shape)


def layer1_statistics(features: FeatureSet, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-image (count, sum, outer-product sum) per dominant orientation."""
    counts = np.zeros(n)
    sums = np.zeros((n, n))
    outer = np.zeros((n, n, n))
    if not len(features):
        return counts, sums, outer
    if features.energies.shape[1] != n:
        raise LearningError(f"features have {features.energies.shape[1]} orientations, expected {n}")
    peak = features.energies.max(axis=1, keepdims=True)
    fhat = features.energies / np.where(peak > 0, peak, 1.0)
    dom = features.dominant
    for i in range(n):
        bucket = fhat[dom == i]
        counts[i] = len(bucket)
        sums[i] = bucket.sum(axis=0)
        outer[i] = bucket.T @ bucket
    return counts, sums, outer


def estimate_layer1_params(
    feature_sets: Sequence[FeatureSet],
    n: int,
    cfg: LearningSettings | None = None,
) -> list[Layer1Fit]:
    cfg = cfg or settings.learning
    stats = [layer1_statistics(fs, n) for fs in feature_sets]
    if not stats:
        stats = [layer1_statistics(FeatureSet.empty(1, 1, n), n)]
    counts = _fsum_stack([s[0] for s in stats])
    sums = _fsum_stack([s[1] for s in stats])
    outer = _fsum_stack([s[2] for s in stats])

    fits = []
    for i in range(n):
        c = int(round(counts[i]))
        if c < cfg.layer1_min_samples:
            logger.warning("Orientation %d: %d samples, using prior", i, c)
            fits.append(Layer1Fit(i, c, np.eye(n)[i], np.eye(n) * cfg.layer1_prior_var, True))
            continue
        mean = sums[i] / c
        cov = outer[i] / c - np.outer(mean, mean)
        fits.append(Layer1Fit(i, c, mean, regularize_covariance(cov, cfg.layer1_cov_floor), False))
    logger.info("Layer 1 estimated from %d features", int(counts.sum()))
    return fits


def apply_layer1(vocab: Vocabulary, fits: Iterable[Layer1Fit]) -> Vocabulary:
    by_orientation = {c.orientation: c for c in vocab.layer(1).compositions}
    for fit in fits:
        comp = by_orientation.get(fit.orientation)
        if comp is None:
            raise LearningError(f"no layer-1 model for orientation {fit.orientation}")
        comp.set_layer1(fit.mean, fit.cov, estimated=True)
    return vocab


# ── Geometry re-estimation ────────────────────────────────────────────────────

@dataclass
class ReestimationResult:
    layer: int
    history: list[float] = field(default_factory=list)  # mean best score per round
    untouched: list[int] = field(default_factory=list)  # compositions never winning
    rolled_back: bool = False


def _assign(
    vocab: Vocabulary,
    layer_idx: int,
    graphs: Sequence[InferenceGraph],
    tau: float,
) -> tuple[float, dict[int, dict[int, list[tuple[int, int]]]]]:
    """Winner-take-all per lower-layer state; returns (mean best score, offsets).

    offsets[comp_id][part_index] lists the observed child offsets.
    """
    comps = sorted(vocab.layer(layer_idx).compositions, key=lambda c: c.id)
    alpha = settings.inference.repulsive_alpha
    offsets: dict[int, dict[int, list[tuple[int, int]]]] = defaultdict(lambda: defaultdict(list))
    best_scores: list[float] = []
    for graph in graphs:
        table = graph.pooled.get(layer_idx - 1)
        if table is None:
            raise LearningError(f"graph not built to layer {layer_idx - 1}")
        if not len(table):
            continue
        index = LayerIndex(table, graph.shapes[layer_idx - 1])
        best = np.zeros(len(table))
        owner = np.full(len(table), -1, dtype=np.int64)
        picks: dict[int, np.ndarray] = {}
        for k, comp in enumerate(comps):
            anchors = np.nonzero(np.isin(table.nodes, comp.parts[0].appearance.support))[0]
            if not len(anchors):
                continue
            s, chosen = score_anchors(comp, index, anchors, tau, alpha)
            better = (s > best[anchors]) & (s > 0) & (s >= tau)
            rows = anchors[better]
            best[rows] = s[better]
            owner[rows] = k
            for r, ch in zip(rows, chosen[better]):
                picks[int(r)] = ch
        best_scores.extend(best.tolist())
        for r in np.nonzero(owner >= 0)[0]:
            comp = comps[owner[r]]
            for p, part in enumerate(comp.parts):
                child = picks[int(r)][p]
                if p == 0 or part.is_repulsive or child < 0:
                    continue
                offsets[comp.id][p].append((int(table.xs[child] - table.xs[r]), int(table.ys[child] - table.ys[r])))
    mean = math.fsum(best_scores) / len(best_scores) if best_scores else 0.0
    return mean, offsets


def _refit(part: Part, samples: list[tuple[int, int]], radius: int, floor: float) -> Part:
    pts = np.asarray(samples, dtype=np.float64)
    mean = pts.mean(axis=0)
    norm = math.hypot(*mean)
    if norm > radius:
        mean *= radius / norm
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    return Part(part.appearance, GeometryParam.from_arrays(mean, regularize_covariance(cov, floor)), part.polarity)


def reestimate_geometry(
    vocab: Vocabulary,
    layer_idx: int,
    graphs: Sequence[InferenceGraph],
    tau: float | None = None,
    rounds: int | None = None,
    compositions: Iterable[int] | None = None,
    cfg: LearningSettings | None = None,
) -> ReestimationResult:
    """Refit part Gaussians of `compositions` (default: the whole layer).

    Every composition of the layer competes for each lower-layer state; only the
    selected ones are refitted. A round that lowers the mean best score is
    rolled back and ends the iteration.
    """
    cfg = cfg or settings.learning
    layer = vocab.layer(layer_idx)
    tau = layer.threshold if tau is None else tau
    rounds = cfg.em_rounds if rounds is None else rounds
    targets = {c.id for c in layer.compositions} if compositions is None else set(compositions)
    result = ReestimationResult(layer_idx)

    current, offsets = _assign(vocab, layer_idx, graphs, tau)
    result.history.append(current)
    for rnd in range(rounds):
        snapshot = {c.id: list(c.parts) for c in layer.compositions if c.id in targets}
        for comp in layer.compositions:
            if comp.id not in targets or comp.id not in offsets:
                continue
            parts = list(comp.parts)
            for p, samples in offsets[comp.id].items():
                parts[p] = _refit(parts[p], samples, layer.radius, cfg.cov_floor)
            comp.parts = canonical_parts(parts)
        new, new_offsets = _assign(vocab, layer_idx, graphs, tau)
        if new < current - 1e-12:
            for comp in layer.compositions:
                if comp.id in snapshot:
                    comp.parts = snapshot[comp.id]
            result.rolled_back = True
            logger.warning("Layer %d round %d lowered the mean score (%.4f < %.4f); rolled back", layer_idx, rnd + 1, new, current)
            break
        current, offsets = new, new_offsets
        result.history.append(current)

    result.untouched = sorted(t for t in targets if t not in offsets)
    if result.untouched:
        logger.warning("Layer %d: %d compositions had no detections: %s", layer_idx, len(result.untouched), result.untouched[:10])
    logger.info("Layer %d re-estimated: mean score %s", layer_idx, ", ".join(f"{h:.4f}" for h in result.history))
    return result


# ── Object-layer appearance ───────────────────────────────────────────────────

def estimate_object_appearance(
    vocab: Vocabulary,
    graphs: Sequence[InferenceGraph],
    iou_threshold: float | None = None,
    compositions: Iterable[int] | None = None,
) -> dict[int, list[dict[int, float]]]:
    """Histogram interchangeable OR nodes under each part of the best object state.

    Graphs must be built to the object layer. Returns the new weights per
    composition (normal parts only, in part order); parts that never saw a
    detection keep their one-hot appearance.
    """
    iou_threshold = settings.learning.appearance_iou if iou_threshold is None else iou_threshold
    top_idx = vocab.object_layer
    lower = top_idx - 1
    layer = vocab.layer(top_idx)
    targets = {c.id for c in layer.compositions} if compositions is None else set(compositions)
    counts: dict[int, dict[int, dict[int, int]]] = defaultdict(lambda: defaultdict(lambda: defaultdict(int)))

    for graph in graphs:
        top = graph.composed.get(top_idx)
        if top is None or not len(top):
            continue
        best = int(np.lexsort((np.arange(len(top)), -top.scores))[0])
        comp = vocab.composition(int(top.nodes[best]))
        if comp.id not in targets:
            continue
        table = graph.pooled[lower]
        normal = [p for p, part in enumerate(comp.parts) if not part.is_repulsive]
        for p, child in zip(normal, top.child_rows(best)):
            child_supp = support(graph, StateRef(lower, True, int(child)))
            near = np.nonzero(
                (np.abs(table.xs - table.xs[child]) <= _COLOCATED)
                & (np.abs(table.ys - table.ys[child]) <= _COLOCATED)
            )[0]
            for r in near:
                if r == child or support_iou(child_supp, support(graph, StateRef(lower, True, int(r)))) > iou_threshold:
                    counts[comp.id][p][int(table.nodes[r])] += 1

    updated: dict[int, list[dict[int, float]]] = {}
    for comp in layer.compositions:
        if comp.id not in counts:
            continue
        parts = list(comp.parts)
        for p, hist in counts[comp.id].items():
            total = sum(hist.values())
            weights = {k: v / total for k, v in sorted(hist.items())}
            # renormalize so the weights sum to one exactly under fsum
            drift = 1.0 - math.fsum(weights.values())
            if drift:
                k = max(weights, key=lambda o: (weights[o], -o))
                weights[k] += drift
            parts[p] = Part(AppearanceParam(weights), parts[p].geometry, parts[p].polarity)
        comp.parts = canonical_parts(parts)
        updated[comp.id] = [p.appearance.weights for p in comp.parts if not p.is_repulsive]
    logger.info("Object appearance re-estimated for %d compositions", len(updated))
    return updated
