"""OR nodes: shape-context prototypes per composition, average-linkage clustering."""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform

from compvocab.config import LearningSettings, settings
from compvocab.exceptions import LearningError
from compvocab.services.inference import InferenceGraph, StateRef, support
from compvocab.services.vocabulary import Composition, ORComposition, Vocabulary

logger = logging.getLogger(__name__)

# normalized radius range covered by the log-polar bins
_R_INNER = 0.125
_R_OUTER = 2.0


@dataclass(frozen=True)
class ShapeDescriptor:
    hist: np.ndarray  # (radial, angular), L1-normalized

    @property
    def binning(self) -> tuple[int, int]:
        return self.hist.shape


def shape_context(points: Iterable[tuple[int, int]], radial: int | None = None, angular: int | None = None) -> ShapeDescriptor:
    """Log-polar histogram of offsets about the centroid, radius-normalized."""
    cfg = settings.learning
    radial = cfg.sc_radial_bins if radial is None else radial
    angular = cfg.sc_angular_bins if angular is None else angular
    pts = np.asarray(sorted(set(points)), dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise LearningError("shape context needs at least 2 distinct points")
    d = pts - pts.mean(axis=0)
    r = np.hypot(d[:, 0], d[:, 1])
    scale = r.mean()
    if scale <= 0:
        raise LearningError("degenerate support")
    edges = np.geomspace(_R_INNER, _R_OUTER, radial + 1)
    rb = np.clip(np.searchsorted(edges, r / scale, side="right") - 1, 0, radial - 1)
    theta = np.arctan2(d[:, 1], d[:, 0])
    ab = np.floor((theta + math.pi) / (2 * math.pi / angular)).astype(np.int64) % angular
    hist = np.zeros((radial, angular))
    np.add.at(hist, (rb, ab), 1.0)
    return ShapeDescriptor(hist / len(pts))


def chi2(a: ShapeDescriptor, b: ShapeDescriptor) -> float:
    if a.binning != b.binning:
        raise LearningError(f"descriptor binning mismatch: {a.binning} vs {b.binning}")
    s = a.hist + b.hist
    mask = s > 0
    return float(0.5 * np.sum((a.hist[mask] - b.hist[mask]) ** 2 / s[mask]))


def prototype(descriptors: Sequence[ShapeDescriptor]) -> int:
    """Index of the descriptor with least summed chi2 to the others."""
    if not descriptors:
        raise LearningError("prototype of an empty set")
    totals = [math.fsum(chi2(d, e) for e in descriptors) for d in descriptors]
    return int(np.argmin(totals))


def collect_or_samples(
    vocab: Vocabulary,
    layer_idx: int,
    graphs: Sequence[InferenceGraph],
    compositions: Iterable[int],
    per_composition: int | None = None,
) -> dict[int, list[frozenset]]:
    """Supports of the highest-scoring states of each composition (graphs built to layer_idx)."""
    per_composition = settings.learning.or_samples if per_composition is None else per_composition
    wanted = set(compositions)
    ranked: dict[int, list[tuple[float, int, int]]] = {c: [] for c in wanted}
    for gi, graph in enumerate(graphs):
        table = graph.composed.get(layer_idx)
        if table is None:
            raise LearningError(f"graph {gi} not built to layer {layer_idx}")
        for r in range(len(table)):
            node = int(table.nodes[r])
            if node in wanted:
                ranked[node].append((-float(table.scores[r]), gi, r))
    samples = {}
    for comp_id, entries in ranked.items():
        entries.sort()
        samples[comp_id] = [
            support(graphs[gi], StateRef(layer_idx, False, r)) for _, gi, r in entries[:per_composition]
        ]
    return samples


def build_or_layer(
    vocab: Vocabulary,
    layer_idx: int,
    samples: Mapping[int, Sequence[frozenset]],
    cutoff: float | None = None,
    first_or_id: int | None = None,
    compositions: Iterable[int] | None = None,
    cfg: LearningSettings | None = None,
) -> list[ORComposition]:
    """OR nodes partitioning `compositions` (default: those without an OR node).

    Existing OR nodes are never changed. Compositions without usable samples
    become singleton OR nodes.
    """
    cfg = cfg or settings.learning
    cutoff = cfg.or_cutoff if cutoff is None else cutoff
    layer = vocab.layer(layer_idx)
    if compositions is None:
        owned = set(vocab.or_of(layer_idx))
        compositions = [c.id for c in layer.compositions if c.id not in owned]
    comp_ids = sorted(set(compositions))
    first_or_id = vocab.next_or_id() if first_or_id is None else first_or_id

    protos: list[tuple[int, ShapeDescriptor]] = []
    singletons: list[int] = []
    for cid in comp_ids:
        descs = []
        for supp in samples.get(cid, ()):
            try:
                descs.append(shape_context(supp, cfg.sc_radial_bins, cfg.sc_angular_bins))
            except LearningError:
                continue
        if descs:
            protos.append((cid, descs[prototype(descs)]))
        else:
            singletons.append(cid)

    groups: list[list[int]] = [[cid] for cid in singletons]
    if len(protos) == 1:
        groups.append([protos[0][0]])
    elif protos:
        n = len(protos)
        dist = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                dist[i, j] = dist[j, i] = chi2(protos[i][1], protos[j][1])
        labels = fcluster(linkage(squareform(dist, checks=False), method="average"), t=cutoff, criterion="distance")
        by_label: dict[int, list[int]] = {}
        for (cid, _), lab in zip(protos, labels):
            by_label.setdefault(int(lab), []).append(cid)
        groups.extend(by_label.values())

    groups = sorted((sorted(g) for g in groups), key=lambda g: g[0])
    nodes = [ORComposition(first_or_id + k, layer_idx, tuple(g)) for k, g in enumerate(groups)]
    logger.info(
        "Layer %d: %d compositions grouped into %d OR nodes (%d without samples)",
        layer_idx, len(comp_ids), len(nodes), len(singletons),
    )
    return nodes


def provisional_or_nodes(comps: Sequence[Composition], first_or_id: int) -> list[ORComposition]:
    """One singleton OR node per composition, used until clustering runs."""
    return [ORComposition(first_or_id + k, c.layer, (c.id,)) for k, c in enumerate(sorted(comps, key=lambda c: c.id))]


def replace_or_nodes(vocab: Vocabulary, layer_idx: int, old: Iterable[int], new: Sequence[ORComposition]) -> None:
    layer = vocab.layer(layer_idx)
    old = set(old)
    layer.or_nodes = sorted([o for o in layer.or_nodes if o.id not in old] + list(new), key=lambda o: o.id)
