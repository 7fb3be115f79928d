"""Learn layer l from layer l-1: pair histograms, duplets, candidate
compositions over neighborhoods, greedy selection refined by Metropolis-Hastings."""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve, maximum_filter
from scipy.spatial import cKDTree

from compvocab.config import LearningSettings, settings
from compvocab.exceptions import LearningError
from compvocab.services.evaluation import best_f_measure
from compvocab.services.inference import (
    InferenceGraph,
    LayerIndex,
    StateRef,
    bounding_box,
    score_anchors,
    support,
    support_of_set,
    window_cutoff,
)
from compvocab.services.vocabulary import (
    AppearanceParam,
    Composition,
    GeometryParam,
    Part,
    Polarity,
    Vocabulary,
    canonical_parts,
    reference_part,
)
from compvocab.utils.io import atomic_write, write_json

logger = logging.getLogger(__name__)

_BINOMIAL = np.outer([1, 2, 1], [1, 2, 1]) / 16.0

Box = tuple[float, float, float, float]
CandidateKey = tuple[str, tuple[int, ...]]


# ── Types ─────────────────────────────────────────────────────────────────────

@dataclass
class PairHistogram:
    ref: int
    other: int
    radius: int
    counts: np.ndarray  # (2r+1, 2r+1), indexed [dy + r, dx + r]

    @classmethod
    def zeros(cls, ref: int, other: int, radius: int) -> PairHistogram:
        side = 2 * radius + 1
        return cls(ref, other, radius, np.zeros((side, side), dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: PairHistogram) -> PairHistogram:
        if (self.ref, self.other, self.radius) != (other.ref, other.other, other.radius):
            raise LearningError("cannot merge histograms of different pairs")
        return PairHistogram(self.ref, self.other, self.radius, self.counts + other.counts)


@dataclass(frozen=True)
class Duplet:
    ref: int
    other: int
    geometry: GeometryParam

    @property
    def sort_key(self) -> tuple:
        return (self.ref, self.other, *self.geometry.angle_key)


@dataclass
class Neighborhood:
    id: int
    graph: int
    center: int  # row in pooled[l-1]
    radius: int
    members: np.ndarray  # rows in pooled[l-1], center included
    support: frozenset


@dataclass
class CandidateComposition:
    key: CandidateKey
    num_parts: int
    coverage: dict[int, float] = field(default_factory=dict)  # neighborhood id -> best
    occurrences: int = 0
    composition_id: int | None = None  # set for compositions already in the vocabulary

    @property
    def score(self) -> float:
        return math.fsum(self.coverage.values())

    @property
    def duplets(self) -> tuple[int, ...]:
        return () if self.composition_id is not None else self.key[1]


@dataclass
class CandidatePool:
    duplets: list[Duplet]
    candidates: dict[CandidateKey, CandidateComposition]
    num_neighborhoods: int

    def __len__(self) -> int:
        return len(self.candidates)

    def keys(self) -> list[CandidateKey]:
        return sorted(self.candidates)


# ── Supports ──────────────────────────────────────────────────────────────────

def support_iou(a: frozenset, b: frozenset) -> float:
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def overlap(graph: InferenceGraph, a: StateRef, b: StateRef) -> float:
    return support_iou(support(graph, a), support(graph, b))


def _pair_overlaps(graph: InferenceGraph, layer: int, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    table = graph.pooled[layer]
    if layer == 1:
        # singleton supports: overlap is 1 at the same pixel, else 0
        same = (table.xs[left] == table.xs[right]) & (table.ys[left] == table.ys[right])
        return same.astype(np.float64)
    return np.array([
        overlap(graph, StateRef(layer, True, int(i)), StateRef(layer, True, int(j)))
        for i, j in zip(left, right)
    ])


def _in_regions(graph: InferenceGraph, layer: int, rows: np.ndarray, regions: Sequence[Box] | None) -> np.ndarray:
    if regions is None:
        return np.ones(len(rows), dtype=bool)
    table = graph.pooled[layer]
    px, py = graph.to_pixels(layer, table.xs[rows].astype(np.float64), table.ys[rows].astype(np.float64))
    mask = np.zeros(len(rows), dtype=bool)
    for x0, y0, x1, y1 in regions:
        mask |= (px >= x0) & (px <= x1) & (py >= y0) & (py <= y1)
    return mask


def select_centers(
    graph: InferenceGraph,
    layer: int,
    cap: int,
    rng: np.random.Generator,
    regions: Sequence[Box] | None = None,
) -> np.ndarray:
    rows = np.arange(len(graph.pooled[layer]))
    rows = rows[_in_regions(graph, layer, rows, regions)]
    if len(rows) > cap:
        rows = np.sort(rng.choice(rows, size=cap, replace=False))
    return rows


# ── Histograms and duplets ────────────────────────────────────────────────────

def accumulate_histograms(
    graphs: Sequence[InferenceGraph],
    layer_idx: int,
    radius: int,
    rng: np.random.Generator,
    regions: Sequence[Sequence[Box] | None] | None = None,
    cfg: LearningSettings | None = None,
) -> dict[tuple[int, int], PairHistogram]:
    """Offsets of admissible ordered state pairs on layer `layer_idx - 1`."""
    cfg = cfg or settings.learning
    lower = layer_idx - 1
    merged: dict[tuple[int, int], PairHistogram] = {}
    for gi, graph in enumerate(graphs):
        table = graph.pooled.get(lower)
        if table is None:
            raise LearningError(f"graph {gi} not built to layer {lower}")
        if len(table) < 2:
            continue
        centers = select_centers(graph, lower, cfg.max_centers, rng, regions[gi] if regions else None)
        points = np.stack([table.xs, table.ys], axis=1).astype(np.float64)
        tree = cKDTree(points)
        left, right = [], []
        for c, nbrs in zip(centers, tree.query_ball_point(points[centers], r=radius + 1e-9)):
            nbrs = np.asarray(sorted(nbrs), dtype=np.int64)
            nbrs = nbrs[nbrs != c]
            left.append(np.full(len(nbrs), c))
            right.append(nbrs)
        if not left:
            continue
        left = np.concatenate(left)
        right = np.concatenate(right)
        ok = _pair_overlaps(graph, lower, left, right) < cfg.max_overlap
        left, right = left[ok], right[ok]
        dx = table.xs[right] - table.xs[left]
        dy = table.ys[right] - table.ys[left]
        pairs = np.stack([table.nodes[left], table.nodes[right]], axis=1)
        uniq, inverse = np.unique(pairs, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        for k, (i, j) in enumerate(uniq):
            sel = inverse == k
            hist = PairHistogram.zeros(int(i), int(j), radius)
            np.add.at(hist.counts, (dy[sel] + radius, dx[sel] + radius), 1)
            key = (int(i), int(j))
            merged[key] = merged[key].merge(hist) if key in merged else hist
    logger.info(
        "Layer %d histograms: %d pairs, %d samples",
        layer_idx, len(merged), sum(h.total for h in merged.values()),
    )
    return merged


def regularize_covariance(cov: np.ndarray, floor: float) -> np.ndarray:
    """Symmetrize and lift every eigenvalue to at least `floor`."""
    cov = (np.asarray(cov, dtype=np.float64) + np.asarray(cov, dtype=np.float64).T) / 2
    vals, vecs = np.linalg.eigh(cov)
    return (vecs * np.maximum(vals, floor)) @ vecs.T


def find_modes(hist: PairHistogram, layer_idx: int, cfg: LearningSettings | None = None) -> list[GeometryParam]:
    cfg = cfg or settings.learning
    counts = hist.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        return []
    if layer_idx >= cfg.smooth_from_layer:
        counts = convolve(counts, _BINOMIAL, mode="constant")
    floor = max(cfg.mode_mass_fraction * total, cfg.mode_min_count)
    peaks = (counts == maximum_filter(counts, size=3, mode="constant")) & (counts >= floor)
    rows, cols = np.nonzero(peaks)
    order = sorted(zip(-counts[rows, cols], rows, cols))
    accepted: list[tuple[int, int]] = []
    for _, r, c in order:
        if all(max(abs(r - ar), abs(c - ac)) > cfg.mode_suppression for ar, ac in accepted):
            accepted.append((int(r), int(c)))

    half = cfg.fit_window // 2
    side = counts.shape[0]
    modes = []
    for r, c in accepted:
        r0, r1 = max(0, r - half), min(side, r + half + 1)
        c0, c1 = max(0, c - half), min(side, c + half + 1)
        w = counts[r0:r1, c0:c1]
        gy, gx = np.mgrid[r0:r1, c0:c1]
        d = np.stack([(gx - hist.radius).ravel(), (gy - hist.radius).ravel()], axis=1).astype(np.float64)
        wf = w.ravel()
        mass = wf.sum()
        mean = wf @ d / mass
        centered = d - mean
        cov = (centered * wf[:, None]).T @ centered / mass
        if math.hypot(*mean) > hist.radius:
            continue
        modes.append(GeometryParam.from_arrays(mean, regularize_covariance(cov, cfg.cov_floor)))
    return modes


def extract_duplets(
    histograms: dict[tuple[int, int], PairHistogram],
    layer_idx: int,
    cfg: LearningSettings | None = None,
) -> list[Duplet]:
    duplets = [
        Duplet(i, j, geom)
        for (i, j), hist in histograms.items()
        for geom in find_modes(hist, layer_idx, cfg)
    ]
    duplets.sort(key=lambda d: d.sort_key)
    logger.info("Layer %d: %d duplets from %d histograms", layer_idx, len(duplets), len(histograms))
    return duplets


# ── Resume artifacts ──────────────────────────────────────────────────────────

def save_histograms(histograms: dict[tuple[int, int], PairHistogram], radius: int, path: str | Path) -> Path:
    keys = sorted(histograms)
    side = 2 * radius + 1
    counts = np.stack([histograms[k].counts for k in keys]) if keys else np.zeros((0, side, side), dtype=np.int64)
    with atomic_write(path, "wb") as fh:
        np.savez(fh, pairs=np.array(keys, dtype=np.int64).reshape(-1, 2), counts=counts, radius=radius)
    return Path(path)


def load_histograms(path: str | Path) -> dict[tuple[int, int], PairHistogram]:
    try:
        with np.load(path) as data:
            radius = int(data["radius"])
            return {
                (int(i), int(j)): PairHistogram(int(i), int(j), radius, counts.astype(np.int64))
                for (i, j), counts in zip(data["pairs"], data["counts"])
            }
    except (OSError, KeyError, ValueError) as e:
        raise LearningError(f"cannot read histograms {path}: {e}") from e


def save_duplets(duplets: Sequence[Duplet], path: str | Path) -> Path:
    write_json(path, [
        {"ref": d.ref, "other": d.other, "mean": list(d.geometry.mean), "cov": [list(r) for r in d.geometry.cov]}
        for d in duplets
    ])
    return Path(path)


def load_duplets(path: str | Path) -> list[Duplet]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        duplets = [Duplet(int(d["ref"]), int(d["other"]), GeometryParam.from_arrays(d["mean"], d["cov"])) for d in raw]
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise LearningError(f"cannot read duplets {path}: {e}") from e
    return sorted(duplets, key=lambda d: d.sort_key)


def save_pool(pool: CandidatePool, path: str | Path) -> Path:
    """Candidate summary for inspection; not read back."""
    write_json(path, {
        "num_neighborhoods": pool.num_neighborhoods,
        "candidates": [
            {
                "kind": key[0], "members": list(key[1]),
                "num_parts": c.num_parts, "score": c.score, "occurrences": c.occurrences,
                "composition_id": c.composition_id,
            }
            for key, c in ((k, pool.candidates[k]) for k in pool.keys())
        ],
    })
    return Path(path)


# ── Neighborhoods and candidates ──────────────────────────────────────────────

def build_neighborhoods(
    graphs: Sequence[InferenceGraph],
    layer_idx: int,
    radius: int,
    rng: np.random.Generator,
    regions: Sequence[Sequence[Box] | None] | None = None,
    cfg: LearningSettings | None = None,
) -> list[Neighborhood]:
    cfg = cfg or settings.learning
    lower = layer_idx - 1
    out: list[Neighborhood] = []
    for gi, graph in enumerate(graphs):
        table = graph.pooled[lower]
        if not len(table):
            continue
        centers = select_centers(graph, lower, cfg.max_centers, rng, regions[gi] if regions else None)
        points = np.stack([table.xs, table.ys], axis=1).astype(np.float64)
        tree = cKDTree(points)
        for c, nbrs in zip(centers, tree.query_ball_point(points[centers], r=radius + 1e-9)):
            members = np.asarray(sorted(nbrs), dtype=np.int64)
            supp = support_of_set(graph, (StateRef(lower, True, int(m)) for m in members))
            out.append(Neighborhood(len(out), gi, int(c), radius, members, supp))
    return out


def _match_duplets(
    graph: InferenceGraph,
    lower: int,
    nbhd: Neighborhood,
    duplets_by_ref: dict[int, list[tuple[int, Duplet]]],
    tau: float,
    cfg: LearningSettings,
) -> list[tuple[int, int, float]]:
    """Best (duplet index, state row, score) per duplet anchored at the center."""
    table = graph.pooled[lower]
    c = nbhd.center
    center_ref = StateRef(lower, True, c)
    cutoff2 = window_cutoff(tau) ** 2
    by_or: dict[int, list[int]] = defaultdict(list)
    for m in nbhd.members:
        if m != c:
            by_or[int(table.nodes[m])].append(int(m))
    matches = []
    for di, duplet in duplets_by_ref.get(int(table.nodes[c]), []):
        rows = by_or.get(duplet.other)
        if not rows:
            continue
        inv = np.linalg.inv(duplet.geometry.sigma)
        best, best_row = 0.0, -1
        for r in rows:
            d = np.array([table.xs[r] - table.xs[c], table.ys[r] - table.ys[c]], dtype=np.float64) - duplet.geometry.mu
            m2 = float(d @ inv @ d)
            if m2 > cutoff2 + 1e-12:
                continue
            value = table.scores[r] * math.exp(-0.5 * m2)
            if value > best and overlap(graph, center_ref, StateRef(lower, True, r)) < cfg.max_overlap:
                best, best_row = value, r
        score = float(table.scores[c]) * best
        if best_row >= 0 and score > tau:
            matches.append((di, best_row, score))
    matches.sort(key=lambda m: (-m[2], m[0]))
    cap = cfg.matches_per_neighborhood or cfg.max_parts - 1
    return sorted(matches[:cap])


def _tree_subsets(graph: InferenceGraph, lower: int, matches: list[tuple[int, int, float]], limit: int, max_overlap: float):
    """Non-empty match subsets whose second parts pairwise overlap < max_overlap."""
    refs = [StateRef(lower, True, r) for _, r, _ in matches]

    def dfs(start: int, chosen: list[int]):
        for i in range(start, len(matches)):
            if any(matches[i][1] == matches[j][1] or overlap(graph, refs[i], refs[j]) >= max_overlap for j in chosen):
                continue
            nxt = chosen + [i]
            yield nxt
            if len(nxt) < limit:
                yield from dfs(i + 1, nxt)

    yield from dfs(0, [])


def enumerate_candidates(
    graphs: Sequence[InferenceGraph],
    neighborhoods: Sequence[Neighborhood],
    duplets: Sequence[Duplet],
    tau: float,
    layer_idx: int,
    preselected: Sequence[Composition] = (),
    cfg: LearningSettings | None = None,
) -> CandidatePool:
    cfg = cfg or settings.learning
    lower = layer_idx - 1
    by_ref: dict[int, list[tuple[int, Duplet]]] = defaultdict(list)
    for di, d in enumerate(duplets):
        by_ref[d.ref].append((di, d))
    candidates: dict[CandidateKey, CandidateComposition] = {}

    def record(key: CandidateKey, parts: int, nid: int, cov: float, comp_id: int | None = None) -> None:
        cand = candidates.get(key)
        if cand is None:
            cand = candidates[key] = CandidateComposition(key, parts, composition_id=comp_id)
        cand.occurrences += 1
        if cov > cand.coverage.get(nid, 0.0):
            cand.coverage[nid] = cov

    indexes: dict[int, LayerIndex] = {}
    for nbhd in neighborhoods:
        graph = graphs[nbhd.graph]
        center_supp = support(graph, StateRef(lower, True, nbhd.center))
        matches = _match_duplets(graph, lower, nbhd, by_ref, tau, cfg)
        for subset in _tree_subsets(graph, lower, matches, cfg.max_parts - 1, cfg.max_overlap):
            supp = center_supp.union(*(support(graph, StateRef(lower, True, matches[i][1])) for i in subset))
            key = ("new", tuple(matches[i][0] for i in subset))
            record(key, 1 + len(subset), nbhd.id, support_iou(supp, nbhd.support))

        if preselected:
            if nbhd.graph not in indexes:
                indexes = {nbhd.graph: LayerIndex(graph.pooled[lower], graph.shapes[lower])}
            index = indexes[nbhd.graph]
            center_or = int(graph.pooled[lower].nodes[nbhd.center])
            for comp in preselected:
                if center_or not in comp.parts[0].appearance.support:
                    continue
                s, chosen = score_anchors(comp, index, np.array([nbhd.center]), tau, settings.inference.repulsive_alpha)
                if s[0] <= 0 or s[0] < tau:
                    continue
                supp = support_of_set(graph, (StateRef(lower, True, int(r)) for r in chosen[0] if r >= 0))
                record(("existing", (comp.id,)), comp.num_parts, nbhd.id, support_iou(supp, nbhd.support), comp.id)

    pool = CandidatePool(list(duplets), candidates, len(neighborhoods))
    logger.info("Layer %d: %d candidates over %d neighborhoods", layer_idx, len(pool), len(neighborhoods))
    return pool


# ── Selection ─────────────────────────────────────────────────────────────────

def parts_penalty(pool: CandidatePool, fraction: float) -> float:
    """C = fraction of the mean best coverage per neighborhood."""
    if not pool.num_neighborhoods:
        return 0.0
    best: dict[int, float] = {}
    for cand in pool.candidates.values():
        for nid, cov in cand.coverage.items():
            best[nid] = max(best.get(nid, 0.0), cov)
    return fraction * math.fsum(best.values()) / pool.num_neighborhoods


def objective(pool: CandidatePool, selection: Iterable[CandidateKey], C: float) -> float:
    best: dict[int, float] = {}
    penalty = 0.0
    for key in selection:
        cand = pool.candidates[key]
        penalty += cand.num_parts
        for nid, cov in cand.coverage.items():
            if cov > best.get(nid, 0.0):
                best[nid] = cov
    return math.fsum(best.values()) - C * penalty


def greedy_select(
    pool: CandidatePool,
    C: float,
    epsilon: float,
    stop_fraction: float | None = None,
    preselected: Sequence[CandidateKey] = (),
) -> list[CandidateKey]:
    stop_fraction = settings.learning.stop_fraction if stop_fraction is None else stop_fraction
    if not pool.candidates:
        logger.warning("Empty candidate pool; nothing selected")
        return []
    residual = {k: dict(c.coverage) for k, c in pool.candidates.items()}
    totals = {k: math.fsum(r.values()) for k, r in residual.items()}
    by_nbhd: dict[int, list[CandidateKey]] = defaultdict(list)
    for key in pool.keys():
        for nid in pool.candidates[key].coverage:
            by_nbhd[nid].append(key)
    explained: dict[int, float] = {}
    selected: list[CandidateKey] = []

    def absorb(key: CandidateKey) -> None:
        selected.append(key)
        residual.pop(key, None)
        totals.pop(key, None)
        for nid, cov in pool.candidates[key].coverage.items():
            if cov <= explained.get(nid, 0.0):
                continue
            explained[nid] = cov
            for other in by_nbhd[nid]:
                entries = residual.get(other)
                if entries is None or nid not in entries:
                    continue
                left = pool.candidates[other].coverage[nid] - cov
                if left < epsilon:
                    del entries[nid]
                else:
                    entries[nid] = left
                totals[other] = math.fsum(entries.values())

    for key in preselected:
        if key in pool.candidates:
            absorb(key)

    initial = None
    while totals:
        key = min(totals, key=lambda k: (-(totals[k] - C * pool.candidates[k].num_parts), k))
        value = totals[key] - C * pool.candidates[key].num_parts
        if initial is None:
            initial = value
        if value <= 0 or value < stop_fraction * initial:
            break
        absorb(key)
        for other in [k for k, t in totals.items() if t < epsilon]:
            del totals[other]
            del residual[other]
    logger.info("Greedy selected %d of %d candidates (objective %.4f)", len(selected), len(pool), objective(pool, selected, C))
    return selected


def mcmc_refine(
    selection: Sequence[CandidateKey],
    pool: CandidatePool,
    C: float,
    rng: np.random.Generator,
    beta: float | None = None,
    iterations: int | None = None,
    fixed: Iterable[CandidateKey] = (),
    cfg: LearningSettings | None = None,
) -> list[CandidateKey]:
    """Exchange/add/remove chain; returns the best vocabulary visited."""
    cfg = cfg or settings.learning
    beta = cfg.mcmc_beta if beta is None else beta
    iterations = cfg.mcmc_iterations if iterations is None else iterations
    if beta <= 1:
        raise LearningError("beta must exceed 1")
    mix = np.array([cfg.move_exchange, cfg.move_add, cfg.move_remove], dtype=np.float64)
    mix /= mix.sum()
    fixed = frozenset(fixed)
    all_keys = pool.keys()
    log_beta = math.log(beta)

    current = frozenset(selection)
    cur_obj = objective(pool, current, C)
    best, best_obj = current, cur_obj
    accepted = 0
    for _ in range(iterations):
        move = rng.choice(3, p=mix)
        inside = sorted(current - fixed)
        outside = [k for k in all_keys if k not in current]
        if move == 0 and inside and outside:
            proposal = (current - {inside[rng.integers(len(inside))]}) | {outside[rng.integers(len(outside))]}
        elif move == 1 and outside:
            proposal = current | {outside[rng.integers(len(outside))]}
        elif move == 2 and inside:
            proposal = current - {inside[rng.integers(len(inside))]}
        else:
            continue
        new_obj = objective(pool, proposal, C)
        delta = new_obj - cur_obj
        if delta >= 0 or rng.random() < math.exp(delta * log_beta):
            current, cur_obj = proposal, new_obj
            accepted += 1
            if cur_obj > best_obj:
                best, best_obj = current, cur_obj
    logger.info(
        "MCMC: %d/%d accepted, objective %.4f -> %.4f",
        accepted, iterations, objective(pool, selection, C), best_obj,
    )
    return sorted(best)


def candidates_to_compositions(
    pool: CandidatePool,
    keys: Sequence[CandidateKey],
    layer_idx: int,
    first_id: int,
) -> list[Composition]:
    comps = []
    for key in sorted(keys):
        cand = pool.candidates[key]
        if cand.composition_id is not None:
            continue
        chosen = [pool.duplets[i] for i in cand.duplets]
        parts = [reference_part(chosen[0].ref)] + [
            Part(AppearanceParam.one_hot(d.other), d.geometry) for d in chosen
        ]
        comps.append(Composition(id=first_id + len(comps), layer=layer_idx, parts=canonical_parts(parts)))
    return comps


def discover_repulsive(comps: list[Composition]) -> list[Composition]:
    """Where one composition's parts are a superset of another's plus exactly one
    extra part, add that extra part to the smaller one as repulsive."""

    def signature(p: Part) -> tuple:
        return (p.appearance.primary, tuple(round(v) for v in p.geometry.mean))

    by_sig = {c.id: {signature(p): p for p in c.normal_parts} for c in comps}
    for small in comps:
        small_sig = set(by_sig[small.id])
        for big in comps:
            if big.id == small.id or small.parts[0].appearance != big.parts[0].appearance:
                continue
            extra = set(by_sig[big.id]) - small_sig
            if small_sig < set(by_sig[big.id]) and len(extra) == 1:
                part = by_sig[big.id][extra.pop()]
                if any(p.is_repulsive and signature(p) == signature(part) for p in small.parts):
                    continue
                small.parts = canonical_parts(
                    [*small.parts, Part(part.appearance, part.geometry, Polarity.REPULSIVE)]
                )
                logger.debug("Composition %d gets repulsive part from %d", small.id, big.id)
    return comps


# ── Layer orchestration ───────────────────────────────────────────────────────

@dataclass
class LayerLearningResult:
    layer: int
    compositions: list[Composition]
    reused: list[int]
    num_duplets: int
    pool_size: int
    greedy_objective: float
    final_objective: float


def learn_layer(
    vocab: Vocabulary,
    graphs: Sequence[InferenceGraph],
    layer_idx: int,
    rng: np.random.Generator,
    regions: Sequence[Sequence[Box] | None] | None = None,
    cfg: LearningSettings | None = None,
    artifacts_dir: str | Path | None = None,
) -> LayerLearningResult:
    """Structure of layer `layer_idx`; compositions are returned, not inserted.

    With `artifacts_dir`, histograms and duplets already stored there are
    reused instead of recomputed, and missing ones are written for the next run.
    """
    cfg = cfg or settings.learning
    layer = vocab.ensure_layer(layer_idx)
    existing = list(layer.compositions)
    hist_rng, nbhd_rng, mcmc_rng = rng.spawn(3)
    art = Path(artifacts_dir) if artifacts_dir is not None else None
    hist_path = art / f"layer{layer_idx}_histograms.npz" if art else None
    duplet_path = art / f"layer{layer_idx}_duplets.json" if art else None

    if duplet_path is not None and duplet_path.exists():
        duplets = load_duplets(duplet_path)
        logger.info("Layer %d: resumed %d duplets from %s", layer_idx, len(duplets), duplet_path)
    else:
        if hist_path is not None and hist_path.exists():
            hists = load_histograms(hist_path)
            logger.info("Layer %d: resumed %d histograms from %s", layer_idx, len(hists), hist_path)
        else:
            hists = accumulate_histograms(graphs, layer_idx, layer.radius, hist_rng, regions, cfg)
            if hist_path is not None:
                save_histograms(hists, layer.radius, hist_path)
        duplets = extract_duplets(hists, layer_idx, cfg)
        if duplet_path is not None:
            save_duplets(duplets, duplet_path)
    neighborhoods = build_neighborhoods(graphs, layer_idx, layer.radius, nbhd_rng, regions, cfg)
    pool = enumerate_candidates(graphs, neighborhoods, duplets, layer.threshold, layer_idx, existing, cfg)
    if art is not None:
        save_pool(pool, art / f"layer{layer_idx}_pool.json")
    if not pool.candidates:
        logger.warning("Layer %d: no candidates, layer left unchanged", layer_idx)
        return LayerLearningResult(layer_idx, [], [], len(duplets), 0, 0.0, 0.0)

    C = parts_penalty(pool, cfg.parts_penalty_fraction)
    pre = [k for k in pool.keys() if pool.candidates[k].composition_id is not None]
    greedy = greedy_select(pool, C, cfg.residual_epsilon, cfg.stop_fraction, pre)
    final = mcmc_refine(greedy, pool, C, mcmc_rng, fixed=pre, cfg=cfg)
    comps = candidates_to_compositions(pool, final, layer_idx, vocab.next_composition_id())
    if cfg.discover_repulsive:
        comps = discover_repulsive(comps)
    reused = sorted(pool.candidates[k].composition_id for k in final if pool.candidates[k].composition_id is not None)
    result = LayerLearningResult(
        layer_idx, comps, reused, len(duplets), len(pool),
        objective(pool, greedy, C), objective(pool, final, C),
    )
    logger.info(
        "Layer %d learned: %d new, %d reused, objective %.4f (greedy %.4f)",
        layer_idx, len(comps), len(reused), result.final_objective, result.greedy_objective,
    )
    return result


# ── Object layer ──────────────────────────────────────────────────────────────

@dataclass
class ValidationImage:
    graph: InferenceGraph  # built to layer O-1
    boxes: list[Box]


def candidate_detections(
    comp: Composition,
    graph: InferenceGraph,
    tau: float,
    padding: float,
) -> list[tuple[float, Box]]:
    """(score, box) for every anchor where `comp` clears tau."""
    lower = comp.layer - 1
    table = graph.pooled.get(lower)
    if table is None or not len(table):
        return []
    anchors = np.nonzero(np.isin(table.nodes, comp.parts[0].appearance.support))[0]
    if not len(anchors):
        return []
    index = LayerIndex(table, graph.shapes[lower])
    scores, chosen = score_anchors(comp, index, anchors, tau, settings.inference.repulsive_alpha)
    eff = tau if comp.threshold is None else max(tau, comp.threshold)
    out = []
    for a, s, kids in zip(anchors, scores, chosen):
        if s <= 0 or s < eff:
            continue
        supp = support_of_set(graph, (StateRef(lower, True, int(r)) for r in kids if r >= 0))
        out.append((float(s), bounding_box(supp, padding)))
    return out


def select_object_layer(
    candidates: Sequence[Composition],
    validation: Sequence[ValidationImage],
    tau: float,
    cfg: LearningSettings | None = None,
) -> list[Composition]:
    """Greedy by F-measure gain of the union detector on validation images."""
    cfg = cfg or settings.learning
    det_cfg = settings.detection
    if not any(v.boxes for v in validation):
        raise LearningError("object layer selection needs positive validation boxes")
    truths = [v.boxes for v in validation]
    dets = {
        c.id: [candidate_detections(c, v.graph, tau, det_cfg.box_padding) for v in validation]
        for c in candidates
    }
    chosen: list[Composition] = []
    current = 0.0
    remaining = list(candidates)
    while remaining:
        scored = []
        for c in remaining:
            union = [
                sum((dets[k.id][i] for k in [*chosen, c]), [])
                for i in range(len(validation))
            ]
            scored.append((best_f_measure(union, truths, det_cfg.iou_threshold, det_cfg.nms_iou), c))
        f, best = max(scored, key=lambda t: t[0])  # first maximum wins ties
        gain = f - current
        if gain < cfg.f_measure_floor:
            break
        chosen.append(best)
        remaining.remove(best)
        current = f
        logger.info("Object layer: composition %d selected (F=%.3f)", best.id, f)
    return chosen


def propose_object_compositions(
    vocab: Vocabulary,
    graphs: Sequence[InferenceGraph],
    rng: np.random.Generator,
    regions: Sequence[Sequence[Box] | None] | None = None,
    cfg: LearningSettings | None = None,
) -> list[Composition]:
    """Existing object compositions that fire on the data, then the top new candidates.

    New candidates get fresh ids but are not inserted into the vocabulary.
    """
    cfg = cfg or settings.learning
    top = vocab.object_layer
    layer = vocab.ensure_layer(top)
    hist_rng, nbhd_rng = rng.spawn(2)
    hists = accumulate_histograms(graphs, top, layer.radius, hist_rng, regions, cfg)
    duplets = extract_duplets(hists, top, cfg)
    neighborhoods = build_neighborhoods(graphs, top, layer.radius, nbhd_rng, regions, cfg)
    pool = enumerate_candidates(graphs, neighborhoods, duplets, layer.threshold, top, list(layer.compositions), cfg)
    ranked = sorted(pool.keys(), key=lambda k: (-pool.candidates[k].score, k))
    reused = [vocab.composition(pool.candidates[k].composition_id) for k in ranked if pool.candidates[k].composition_id is not None]
    fresh_keys = [k for k in ranked if pool.candidates[k].composition_id is None][:cfg.object_candidates]
    fresh = candidates_to_compositions(pool, fresh_keys, top, vocab.next_composition_id())
    logger.info("Object layer: %d existing and %d new candidates", len(reused), len(fresh))
    return reused + fresh
