"""Layered inference graph: layer-1 matching, composition scoring, pruning,
downsampling and OR pooling, plus supports and parse graphs.

State tables are columnar. `composed[l]` holds Z^l (composition states after
downsampling), `pooled[l]` holds the OR-pooled Z-bar^l. Children of a Z^l row
index `pooled[l-1]`; the single child of a Z-bar^l row indexes `composed[l]`.
Locations of layer l live on a grid scaled by the product of rho^1..rho^l.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from compvocab.config import settings
from compvocab.exceptions import InferenceError
from compvocab.services.features import FeatureSet, GaborBankConfig, extract_features
from compvocab.services.vocabulary import Composition, GeometryParam, Vocabulary

logger = logging.getLogger(__name__)

_MIN_TAU = 1e-6


# ── Types ─────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class HiddenState:
    node: int  # composition id, OR id, or class index
    x: int
    y: int
    score: float


@dataclass(frozen=True)
class StateRef:
    layer: int
    pooled: bool
    row: int


@dataclass
class StateTable:
    nodes: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    scores: np.ndarray
    child_ptr: np.ndarray
    children: np.ndarray

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def empty(cls) -> StateTable:
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), np.zeros(0), np.zeros(1, dtype=np.int64), z.copy())

    @classmethod
    def build(cls, nodes, xs, ys, scores, children: list[np.ndarray] | None = None) -> StateTable:
        nodes = np.asarray(nodes, dtype=np.int64)
        if children is None:
            children = [np.zeros(0, dtype=np.int64)] * len(nodes)
        lengths = np.array([len(c) for c in children], dtype=np.int64)
        ptr = np.zeros(len(nodes) + 1, dtype=np.int64)
        np.cumsum(lengths, out=ptr[1:])
        flat = np.concatenate(children).astype(np.int64) if len(children) else np.zeros(0, dtype=np.int64)
        return cls(
            nodes,
            np.asarray(xs, dtype=np.int64),
            np.asarray(ys, dtype=np.int64),
            np.asarray(scores, dtype=np.float64),
            ptr,
            flat,
        )

    def child_rows(self, row: int) -> np.ndarray:
        return self.children[self.child_ptr[row]:self.child_ptr[row + 1]]

    def state(self, row: int) -> HiddenState:
        return HiddenState(int(self.nodes[row]), int(self.xs[row]), int(self.ys[row]), float(self.scores[row]))

    def select(self, rows: np.ndarray) -> StateTable:
        rows = np.asarray(rows, dtype=np.int64)
        return StateTable.build(
            self.nodes[rows], self.xs[rows], self.ys[rows], self.scores[rows],
            [self.child_rows(r) for r in rows],
        )


@dataclass
class InferenceGraph:
    width: int
    height: int
    composed: dict[int, StateTable] = field(default_factory=dict)
    pooled: dict[int, StateTable] = field(default_factory=dict)
    scales: dict[int, float] = field(default_factory=dict)
    shapes: dict[int, tuple[int, int]] = field(default_factory=dict)  # (height, width) per grid
    features: FeatureSet | None = None
    _supports: dict[StateRef, frozenset] = field(default_factory=dict, repr=False)

    @property
    def depth(self) -> int:
        return max(self.pooled, default=0)

    def table(self, layer: int, pooled: bool) -> StateTable:
        tables = self.pooled if pooled else self.composed
        if layer not in tables:
            raise InferenceError(f"graph has no layer {layer}")
        return tables[layer]

    def state(self, ref: StateRef) -> HiddenState:
        return self.table(ref.layer, ref.pooled).state(ref.row)

    def children(self, ref: StateRef) -> list[StateRef]:
        table = self.table(ref.layer, ref.pooled)
        if not 0 <= ref.row < len(table):
            raise InferenceError(f"unknown state {ref}")
        rows = table.child_rows(ref.row)
        if ref.pooled:
            return [StateRef(ref.layer, False, int(r)) for r in rows]
        if ref.layer == 1:
            return []
        return [StateRef(ref.layer - 1, True, int(r)) for r in rows]

    def to_pixels(self, layer: int, x: float, y: float) -> tuple[float, float]:
        s = self.scales[layer]
        return x / s, y / s

    def state_count(self) -> int:
        return sum(len(t) for t in self.composed.values()) + sum(len(t) for t in self.pooled.values())


# ── Geometry ──────────────────────────────────────────────────────────────────

def deformation(offset, geom: GeometryParam) -> float:
    """Unnormalized Gaussian; exactly 1 at the mean."""
    try:
        np.linalg.cholesky(geom.sigma)
    except np.linalg.LinAlgError as exc:
        raise InferenceError(f"singular covariance {geom.cov}") from exc
    d = np.asarray(offset, dtype=np.float64) - geom.mu
    return float(np.exp(-0.5 * d @ np.linalg.solve(geom.sigma, d)))


def window_cutoff(tau: float) -> float:
    """Mahalanobis radius outside which D < tau."""
    return math.sqrt(-2.0 * math.log(max(tau, _MIN_TAU)))


@lru_cache(maxsize=4096)
def part_window(geom: GeometryParam, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Integer offsets with D >= tau, ordered by (dx, dy), and their D values."""
    cutoff = window_cutoff(tau)
    sigma = geom.sigma
    try:
        inv = np.linalg.inv(sigma)
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise InferenceError(f"singular covariance {geom.cov}") from exc
    ext_x = cutoff * math.sqrt(sigma[0, 0])
    ext_y = cutoff * math.sqrt(sigma[1, 1])
    mx, my = geom.mean
    xs = np.arange(math.floor(mx - ext_x), math.ceil(mx + ext_x) + 1)
    ys = np.arange(math.floor(my - ext_y), math.ceil(my + ext_y) + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")  # x-major: lexicographic (dx, dy)
    d = np.stack([gx.ravel() - mx, gy.ravel() - my], axis=1)
    m2 = np.einsum("ij,jk,ik->i", d, inv, d)
    keep = m2 <= cutoff ** 2 + 1e-12
    offsets = np.stack([gx.ravel()[keep], gy.ravel()[keep]], axis=1).astype(np.int64)
    return offsets, np.exp(-0.5 * m2[keep])


# ── Dense view of a pooled layer ──────────────────────────────────────────────

class LayerIndex:
    """Dense (OR, y, x) lookup over a pooled state table."""

    def __init__(self, table: StateTable, shape: tuple[int, int]) -> None:
        self.table = table
        self.height, self.width = shape
        self.or_ids = np.unique(table.nodes)
        self.slot = {int(o): k for k, o in enumerate(self.or_ids)}
        k = np.searchsorted(self.or_ids, table.nodes)
        self.scores = np.zeros((len(self.or_ids), self.height, self.width))
        self.rows = np.full((len(self.or_ids), self.height, self.width), -1, dtype=np.int64)
        self.scores[k, table.ys, table.xs] = table.scores
        self.rows[k, table.ys, table.xs] = np.arange(len(table))

    def lookup(self, k: int, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        inside = (xs >= 0) & (xs < self.width) & (ys >= 0) & (ys < self.height)
        vals = np.zeros(len(xs))
        rows = np.full(len(xs), -1, dtype=np.int64)
        vals[inside] = self.scores[k, ys[inside], xs[inside]]
        rows[inside] = self.rows[k, ys[inside], xs[inside]]
        return vals, rows


# ── Scoring ───────────────────────────────────────────────────────────────────

def score_anchors(
    comp: Composition,
    index: LayerIndex,
    anchor_rows: np.ndarray,
    tau: float,
    alpha: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Score `comp` anchored at each given Z-bar^(l-1) row.

    Returns (scores, chosen) where chosen[:, p] is the child row for normal
    part p (-1 for repulsive parts or when nothing is in range).
    """
    table = index.table
    anchor_rows = np.asarray(anchor_rows, dtype=np.int64)
    ax, ay = table.xs[anchor_rows], table.ys[anchor_rows]
    n = len(anchor_rows)
    total = np.ones(n)
    chosen = np.full((n, len(comp.parts)), -1, dtype=np.int64)

    for p, part in enumerate(comp.parts):
        weights = part.appearance.weights
        if p == 0:
            # the anchor itself is the reference part's match
            w = np.array([weights.get(int(o), 0.0) for o in table.nodes[anchor_rows]])
            total *= table.scores[anchor_rows] * w
            chosen[:, 0] = np.where(w > 0, anchor_rows, -1)
            continue
        offsets, deform = part_window(part.geometry, tau)
        best = np.zeros(n)
        best_row = np.full(n, -1, dtype=np.int64)
        for or_id in part.appearance.support:
            k = index.slot.get(or_id)
            if k is None:
                continue
            compat = weights[or_id]
            for (dx, dy), d in zip(offsets, deform):
                vals, rows = index.lookup(k, ax + dx, ay + dy)
                cand = vals * compat if part.is_repulsive else vals * d * compat
                better = cand > best
                best[better] = cand[better]
                best_row[better] = rows[better]
        if part.is_repulsive:
            total *= alpha * (1.0 - best)
        else:
            total *= best
            chosen[:, p] = best_row
    return total, chosen


def score_composition(
    comp: Composition,
    anchor: int,
    lower: StateTable,
    shape: tuple[int, int],
    tau: float | None = None,
    alpha: float | None = None,
) -> tuple[float, list[int]]:
    """Single-anchor evaluation; same arithmetic as `build_layer`."""
    cfg = settings.inference
    tau = cfg.tau if tau is None else tau
    alpha = cfg.repulsive_alpha if alpha is None else alpha
    index = LayerIndex(lower, shape)
    scores, chosen = score_anchors(comp, index, np.array([anchor]), tau, alpha)
    kids = [int(r) for r, part in zip(chosen[0], comp.parts) if not part.is_repulsive]
    return float(scores[0]), kids


def match_layer1(features: FeatureSet, vocab: Vocabulary, tau: float | None = None) -> StateTable:
    layer = vocab.layer(1)
    tau = layer.threshold if tau is None else tau
    if not len(features):
        return StateTable.empty()
    peak = features.energies.max(axis=1, keepdims=True)
    fhat = features.energies / np.where(peak > 0, peak, 1.0)
    nodes, xs, ys, scores = [], [], [], []
    for comp in sorted(layer.compositions, key=lambda c: c.id):
        if not comp.estimated or comp.mean1 is None:
            raise InferenceError(f"layer-1 model {comp.id} has no estimated parameters")
        d = fhat - np.array(comp.mean1)
        m2 = np.einsum("ij,ij->i", d @ np.linalg.inv(np.array(comp.cov1)), d)
        s = np.exp(-0.5 * m2)
        keep = (s > 0) & (s >= max(tau, comp.threshold or 0.0))
        nodes.append(np.full(keep.sum(), comp.id))
        xs.append(features.locations[keep, 0])
        ys.append(features.locations[keep, 1])
        scores.append(s[keep])
    return StateTable.build(np.concatenate(nodes), np.concatenate(xs), np.concatenate(ys), np.concatenate(scores))


def _dedup_max(nodes, xs, ys, scores) -> np.ndarray:
    """Rows keeping the max score per (node, x, y); ties keep the earliest row.

    Output is ordered by (node, x, y).
    """
    if len(nodes) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(nodes)), -scores, ys, xs, nodes))
    n, x, y = nodes[order], xs[order], ys[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = (n[1:] != n[:-1]) | (x[1:] != x[:-1]) | (y[1:] != y[:-1])
    return order[first]


def build_layer(
    graph: InferenceGraph,
    layer_idx: int,
    vocab: Vocabulary,
    tau: float | None = None,
    alpha: float | None = None,
) -> StateTable:
    """Z^l on the grid of layer l-1 (before downsampling)."""
    layer = vocab.layer(layer_idx)
    lower = graph.pooled.get(layer_idx - 1)
    if lower is None:
        raise InferenceError(f"layer {layer_idx - 1} not built")
    tau = layer.threshold if tau is None else tau
    alpha = settings.inference.repulsive_alpha if alpha is None else alpha
    if not len(lower):
        return StateTable.empty()
    index = LayerIndex(lower, graph.shapes[layer_idx - 1])
    nodes, xs, ys, scores, kids = [], [], [], [], []
    for comp in sorted(layer.compositions, key=lambda c: c.id):
        ref_ors = comp.parts[0].appearance.support
        anchors = np.nonzero(np.isin(lower.nodes, ref_ors))[0]
        if not len(anchors):
            continue
        s, chosen = score_anchors(comp, index, anchors, tau, alpha)
        eff = max(tau, comp.threshold) if comp.threshold is not None else tau
        keep = (s > 0) & (s >= eff)
        if not keep.any():
            continue
        normal = [p for p, part in enumerate(comp.parts) if not part.is_repulsive]
        rows = anchors[keep]
        nodes.append(np.full(len(rows), comp.id))
        xs.append(lower.xs[rows])
        ys.append(lower.ys[rows])
        scores.append(s[keep])
        kids.extend(chosen[keep][:, normal])
    if not nodes:
        return StateTable.empty()
    nodes = np.concatenate(nodes)
    xs = np.concatenate(xs)
    ys = np.concatenate(ys)
    scores = np.concatenate(scores)
    keep = _dedup_max(nodes, xs, ys, scores)
    return StateTable.build(nodes[keep], xs[keep], ys[keep], scores[keep], [kids[r] for r in keep])


def downsample(states: StateTable, rho: float) -> StateTable:
    if not 0 < rho <= 1:
        raise InferenceError(f"downsample factor {rho} outside (0, 1]")
    if not len(states):
        return StateTable.empty()
    xs = np.floor(states.xs * rho).astype(np.int64)
    ys = np.floor(states.ys * rho).astype(np.int64)
    keep = _dedup_max(states.nodes, xs, ys, states.scores)
    return StateTable.build(
        states.nodes[keep], xs[keep], ys[keep], states.scores[keep],
        [states.child_rows(r) for r in keep],
    )


def pool_or(states: StateTable, vocab: Vocabulary, layer_idx: int) -> StateTable:
    if not len(states):
        return StateTable.empty()
    or_of = vocab.or_of(layer_idx)
    try:
        ors = np.array([or_of[int(c)] for c in states.nodes], dtype=np.int64)
    except KeyError as exc:
        raise InferenceError(f"composition {exc.args[0]} has no OR node") from exc
    keep = _dedup_max(ors, states.xs, states.ys, states.scores)
    return StateTable.build(
        ors[keep], states.xs[keep], states.ys[keep], states.scores[keep],
        [np.array([r]) for r in keep],
    )


def _grid_shape(shape: tuple[int, int], rho: float) -> tuple[int, int]:
    h, w = shape
    return int(math.floor((h - 1) * rho)) + 1, int(math.floor((w - 1) * rho)) + 1


def extend_graph(graph: InferenceGraph, vocab: Vocabulary, up_to_layer: int) -> InferenceGraph:
    """Build the missing layers graph.depth+1 .. up_to_layer in place."""
    for idx in range(graph.depth + 1, up_to_layer + 1):
        layer = vocab.layer(idx)
        states = build_layer(graph, idx, vocab)
        rho = layer.downsample
        graph.shapes[idx] = _grid_shape(graph.shapes[idx - 1], rho)
        graph.scales[idx] = graph.scales[idx - 1] * rho
        graph.composed[idx] = downsample(states, rho)
        graph.pooled[idx] = pool_or(graph.composed[idx], vocab, idx)
        logger.debug("Layer %d: %d states, %d pooled", idx, len(graph.composed[idx]), len(graph.pooled[idx]))
    return graph


def truncate_graph(graph: InferenceGraph, depth: int) -> InferenceGraph:
    """Drop layers above `depth` (and their cached supports) in place."""
    for idx in [k for k in graph.pooled if k > depth]:
        del graph.composed[idx], graph.pooled[idx], graph.scales[idx], graph.shapes[idx]
    for ref in [r for r in graph._supports if r.layer > depth]:
        del graph._supports[ref]
    return graph


def infer(
    image: np.ndarray | None,
    vocab: Vocabulary,
    up_to_layer: int | None = None,
    features: FeatureSet | None = None,
    bank: GaborBankConfig | None = None,
) -> InferenceGraph:
    up_to_layer = vocab.depth if up_to_layer is None else up_to_layer
    if up_to_layer < 1 or up_to_layer > vocab.depth:
        raise InferenceError(f"cannot infer to layer {up_to_layer} with {vocab.depth} layers")
    if features is None:
        if image is None:
            raise InferenceError("infer needs an image or precomputed features")
        features = extract_features(image, bank)
    graph = InferenceGraph(features.width, features.height, features=features)
    layer1 = vocab.layer(1)
    graph.shapes[1] = _grid_shape((features.height, features.width), layer1.downsample)
    graph.scales[1] = layer1.downsample
    graph.composed[1] = downsample(match_layer1(features, vocab), layer1.downsample)
    graph.pooled[1] = pool_or(graph.composed[1], vocab, 1)
    return extend_graph(graph, vocab, up_to_layer)


def infer_class_layer(graph: InferenceGraph, vocab: Vocabulary) -> tuple[list[str], StateTable]:
    """Class states: per class, max over its object compositions at each cell.

    Children index `graph.composed[object_layer]`.
    """
    labels = vocab.classes
    top = graph.composed.get(vocab.object_layer)
    if not labels or top is None or not len(top):
        return labels, StateTable.empty()
    owner: dict[int, list[int]] = {}
    for ci, label in enumerate(labels):
        for comp_id in vocab.class_layer[label]:
            owner.setdefault(comp_id, []).append(ci)
    rows, cls = [], []
    for r, comp_id in enumerate(top.nodes):
        for ci in owner.get(int(comp_id), []):
            rows.append(r)
            cls.append(ci)
    if not rows:
        return labels, StateTable.empty()
    rows = np.array(rows, dtype=np.int64)
    cls = np.array(cls, dtype=np.int64)
    keep = _dedup_max(cls, top.xs[rows], top.ys[rows], top.scores[rows])
    return labels, StateTable.build(
        cls[keep], top.xs[rows[keep]], top.ys[rows[keep]], top.scores[rows[keep]],
        [np.array([rows[k]]) for k in keep],
    )


# ── Supports and parse graphs ─────────────────────────────────────────────────

def support(graph: InferenceGraph, ref: StateRef) -> frozenset[tuple[int, int]]:
    """Layer-1 pixel locations reachable from `ref` through max-edges."""
    cached = graph._supports.get(ref)
    if cached is not None:
        return cached
    table = graph.table(ref.layer, ref.pooled)
    if not 0 <= ref.row < len(table):
        raise InferenceError(f"unknown state {ref}")
    if ref.layer == 1 and not ref.pooled:
        s = graph.scales[1]
        result = frozenset({(int(round(table.xs[ref.row] / s)), int(round(table.ys[ref.row] / s)))})
    else:
        result = frozenset().union(*(support(graph, c) for c in graph.children(ref)))
    graph._supports[ref] = result
    return result


def support_of_set(graph: InferenceGraph, refs) -> frozenset[tuple[int, int]]:
    return frozenset().union(*(support(graph, r) for r in refs))


@dataclass
class ParseGraph:
    root: StateRef
    nodes: list[StateRef]
    edges: list[tuple[StateRef, StateRef]]


def parse_graph(graph: InferenceGraph, ref: StateRef) -> ParseGraph:
    seen = {ref}
    order = [ref]
    edges = []
    queue = deque([ref])
    while queue:
        cur = queue.popleft()
        for child in graph.children(cur):
            edges.append((cur, child))
            if child not in seen:
                seen.add(child)
                order.append(child)
                queue.append(child)
    return ParseGraph(ref, order, edges)


def bounding_box(points, padding: float = 0.0) -> tuple[float, float, float, float]:
    """Continuous pixel-extent box (x0, y0, x1, y1) around a point set."""
    arr = np.asarray(sorted(points), dtype=np.float64)
    if not len(arr):
        raise InferenceError("empty support has no bounding box")
    x0, y0 = arr.min(axis=0)
    x1, y1 = arr.max(axis=0) + 1
    return x0 - padding, y0 - padding, x1 + padding, y1 + padding


def dump_graph(graph: InferenceGraph) -> dict:
    """Structured-text view of a graph for debugging."""
    out = {"width": graph.width, "height": graph.height, "layers": []}
    for idx in sorted(graph.pooled):
        entry = {"layer": idx, "scale": graph.scales[idx], "grid": list(graph.shapes[idx])}
        for name, table in (("composed", graph.composed[idx]), ("pooled", graph.pooled[idx])):
            entry[name] = [
                {
                    "node": int(table.nodes[r]), "x": int(table.xs[r]), "y": int(table.ys[r]),
                    "score": float(table.scores[r]), "children": [int(c) for c in table.child_rows(r)],
                }
                for r in range(len(table))
            ]
        out["layers"].append(entry)
    return out
