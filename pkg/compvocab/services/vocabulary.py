"""Layered vocabulary: layer-1 edge models, compositions, OR nodes, class layer."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from compvocab.config import InferenceSettings, settings
from compvocab.exceptions import VocabularyError

logger = logging.getLogger(__name__)

_SUM_TOL = 1e-9


class Polarity(str, Enum):
    NORMAL = "normal"
    REPULSIVE = "repulsive"


# ── Parameters ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class GeometryParam:
    """2-D Gaussian over a part's offset, in layer-(l-1) grid units."""

    mean: tuple[float, float]
    cov: tuple[tuple[float, float], tuple[float, float]]

    @classmethod
    def from_arrays(cls, mean, cov) -> GeometryParam:
        m = np.asarray(mean, dtype=np.float64).reshape(2)
        c = np.asarray(cov, dtype=np.float64).reshape(2, 2)
        c = (c + c.T) / 2
        return cls(
            (float(m[0]), float(m[1])),
            ((float(c[0, 0]), float(c[0, 1])), (float(c[1, 0]), float(c[1, 1]))),
        )

    @classmethod
    def isotropic(cls, mean=(0.0, 0.0), variance: float = 1.0) -> GeometryParam:
        return cls.from_arrays(mean, np.eye(2) * variance)

    @property
    def mu(self) -> np.ndarray:
        return np.array(self.mean)

    @property
    def sigma(self) -> np.ndarray:
        return np.array(self.cov)

    @property
    def angle_key(self) -> tuple[int, float]:
        """Quantized (angle in degrees, radius) used for canonical part order."""
        dx, dy = self.mean
        return round(math.degrees(math.atan2(dy, dx))) % 360, round(math.hypot(dx, dy), 1)


@dataclass
class AppearanceParam:
    weights: dict[int, float]  # OR id one layer below -> compatibility

    @classmethod
    def one_hot(cls, or_id: int) -> AppearanceParam:
        return cls({or_id: 1.0})

    @property
    def support(self) -> list[int]:
        return sorted(k for k, w in self.weights.items() if w > 0)

    @property
    def primary(self) -> int:
        """OR id with the largest weight (lowest id on ties)."""
        return min(self.weights, key=lambda k: (-self.weights[k], k))


@dataclass
class Part:
    appearance: AppearanceParam
    geometry: GeometryParam
    polarity: Polarity = Polarity.NORMAL

    @property
    def is_repulsive(self) -> bool:
        return self.polarity is Polarity.REPULSIVE

    @property
    def order_key(self) -> tuple:
        return (self.appearance.primary, *self.geometry.angle_key)


@dataclass
class Composition:
    id: int
    layer: int
    parts: list[Part] = field(default_factory=list)
    # layer 1 only: Gaussian over orientation-normalized feature vectors
    orientation: int | None = None
    mean1: tuple[float, ...] | None = None
    cov1: tuple[tuple[float, ...], ...] | None = None
    estimated: bool = False
    threshold: float | None = None  # learned tau_omega

    @property
    def normal_parts(self) -> list[Part]:
        return [p for p in self.parts if not p.is_repulsive]

    @property
    def num_parts(self) -> int:
        return len(self.normal_parts)

    def set_layer1(self, mean, cov, estimated: bool = True) -> None:
        m = np.asarray(mean, dtype=np.float64)
        c = np.asarray(cov, dtype=np.float64)
        c = (c + c.T) / 2
        self.mean1 = tuple(float(v) for v in m)
        self.cov1 = tuple(tuple(float(v) for v in row) for row in c)
        self.estimated = estimated


@dataclass
class ORComposition:
    id: int
    layer: int
    members: tuple[int, ...]


@dataclass
class Layer:
    index: int
    radius: int
    downsample: float
    threshold: float
    compositions: list[Composition] = field(default_factory=list)
    or_nodes: list[ORComposition] = field(default_factory=list)


@dataclass
class Vocabulary:
    num_orientations: int
    object_layer: int = 6
    layers: list[Layer] = field(default_factory=list)
    class_layer: dict[str, list[int]] = field(default_factory=dict)

    # ── lookup ──

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def classes(self) -> list[str]:
        return sorted(self.class_layer)

    def layer(self, index: int) -> Layer:
        if index < 1 or index > len(self.layers):
            raise VocabularyError(f"vocabulary has no layer {index}")
        return self.layers[index - 1]

    def compositions(self) -> list[Composition]:
        return [c for layer in self.layers for c in layer.compositions]

    def composition(self, comp_id: int) -> Composition:
        for comp in self.compositions():
            if comp.id == comp_id:
                return comp
        raise VocabularyError(f"unknown composition {comp_id}")

    def or_node(self, or_id: int) -> ORComposition:
        for layer in self.layers:
            for node in layer.or_nodes:
                if node.id == or_id:
                    return node
        raise VocabularyError(f"unknown OR node {or_id}")

    def or_of(self, layer: int) -> dict[int, int]:
        """composition id -> OR id for one layer."""
        return {m: node.id for node in self.layer(layer).or_nodes for m in node.members}

    def next_composition_id(self) -> int:
        return max((c.id for c in self.compositions()), default=-1) + 1

    def next_or_id(self) -> int:
        return max((o.id for layer in self.layers for o in layer.or_nodes), default=-1) + 1

    def effective_threshold(self, comp: Composition) -> float:
        tau = self.layer(comp.layer).threshold
        return tau if comp.threshold is None else max(tau, comp.threshold)

    def copy(self) -> Vocabulary:
        return copy.deepcopy(self)

    # ── growth ──

    def ensure_layer(self, index: int, cfg: InferenceSettings | None = None) -> Layer:
        cfg = cfg or settings.inference
        while len(self.layers) < index:
            k = len(self.layers) + 1
            self.layers.append(Layer(k, cfg.radius(k), cfg.downsample(k), cfg.tau))
        return self.layer(index)

    def add_compositions(self, index: int, comps: list[Composition], ors: list[ORComposition]) -> None:
        layer = self.ensure_layer(index)
        layer.compositions.extend(comps)
        layer.compositions.sort(key=lambda c: c.id)
        layer.or_nodes.extend(ors)
        layer.or_nodes.sort(key=lambda o: o.id)


# ── Construction helpers ──────────────────────────────────────────────────────

def reference_part(or_id: int, epsilon: float | None = None) -> Part:
    eps = settings.inference.reference_epsilon if epsilon is None else epsilon
    return Part(AppearanceParam.one_hot(or_id), GeometryParam.isotropic((0.0, 0.0), eps ** 2))


def canonical_parts(parts: list[Part]) -> list[Part]:
    """Reference first, the rest ordered by (OR id, quantized mean)."""
    if not parts:
        return parts
    head, rest = parts[0], parts[1:]
    return [head, *sorted(rest, key=lambda p: (p.is_repulsive, p.order_key))]


def layer1_default(n: int, cfg: InferenceSettings | None = None) -> Vocabulary:
    """Vocabulary holding n placeholder layer-1 models, one singleton OR each."""
    if n < 2:
        raise VocabularyError("layer 1 needs at least 2 orientations")
    cfg = cfg or settings.inference
    vocab = Vocabulary(num_orientations=n, object_layer=cfg.object_layer)
    layer = vocab.ensure_layer(1, cfg)
    for i in range(n):
        comp = Composition(id=i, layer=1, orientation=i)
        comp.set_layer1(np.eye(n)[i], np.eye(n), estimated=False)
        layer.compositions.append(comp)
        layer.or_nodes.append(ORComposition(id=i, layer=1, members=(i,)))
    return vocab


# ── Validation ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Violation:
    layer: int
    id: int | str
    rule: str
    detail: str = ""

    def __str__(self) -> str:
        return f"layer {self.layer} id {self.id}: {self.rule}" + (f" ({self.detail})" if self.detail else "")


def _is_pd(matrix: np.ndarray) -> bool:
    if not np.all(np.isfinite(matrix)) or not np.allclose(matrix, matrix.T, atol=1e-12):
        return False
    try:
        np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        return False
    return True


def validate(vocab: Vocabulary, epsilon: float | None = None) -> list[Violation]:
    eps = settings.inference.reference_epsilon if epsilon is None else epsilon
    out: list[Violation] = []
    n = vocab.num_orientations
    if n < 2:
        out.append(Violation(0, "-", "num_orientations", f"{n} < 2"))

    seen_comp: set[int] = set()
    seen_or: set[int] = set()
    for pos, layer in enumerate(vocab.layers, start=1):
        if layer.index != pos:
            out.append(Violation(pos, "-", "layer-index", f"found {layer.index}"))
        if not 0 <= layer.threshold <= 1:
            out.append(Violation(pos, "-", "threshold-range", f"{layer.threshold}"))
        if not 0 < layer.downsample <= 1:
            out.append(Violation(pos, "-", "downsample-range", f"{layer.downsample}"))
        if layer.radius < 1:
            out.append(Violation(pos, "-", "radius-range", f"{layer.radius}"))
        lower_ors = {o.id for o in vocab.layers[pos - 2].or_nodes} if pos > 1 else set()
        for comp in layer.compositions:
            if comp.id in seen_comp:
                out.append(Violation(pos, comp.id, "duplicate-id"))
            seen_comp.add(comp.id)
            if comp.layer != pos:
                out.append(Violation(pos, comp.id, "layer-mismatch", f"says {comp.layer}"))
            if comp.threshold is not None and not 0 <= comp.threshold <= 1:
                out.append(Violation(pos, comp.id, "threshold-range", f"{comp.threshold}"))
            if pos == 1:
                out.extend(_validate_layer1(comp, n))
            else:
                out.extend(_validate_parts(vocab, layer, comp, lower_ors, eps))

        members_seen: dict[int, int] = {}
        comp_ids = {c.id for c in layer.compositions}
        for node in layer.or_nodes:
            if node.id in seen_or:
                out.append(Violation(pos, f"or{node.id}", "duplicate-id"))
            seen_or.add(node.id)
            if not node.members:
                out.append(Violation(pos, f"or{node.id}", "empty-or"))
            if node.layer != pos:
                out.append(Violation(pos, f"or{node.id}", "layer-mismatch", f"says {node.layer}"))
            for m in node.members:
                if m not in comp_ids:
                    out.append(Violation(pos, f"or{node.id}", "dangling-member", f"composition {m}"))
                if m in members_seen:
                    out.append(Violation(pos, f"or{node.id}", "or-overlap", f"composition {m} also in or{members_seen[m]}"))
                members_seen[m] = node.id
        for cid in sorted(comp_ids - set(members_seen)):
            out.append(Violation(pos, cid, "no-or-node"))

    if vocab.class_layer:
        top = {c.id for c in vocab.layers[vocab.object_layer - 1].compositions} if vocab.depth >= vocab.object_layer else set()
        for label in vocab.classes:
            ids = vocab.class_layer[label]
            if not ids:
                out.append(Violation(vocab.object_layer, label, "empty-class"))
            for cid in ids:
                if cid not in top:
                    out.append(Violation(vocab.object_layer, label, "class-not-object-layer", f"composition {cid}"))
    return out


def _validate_layer1(comp: Composition, n: int) -> list[Violation]:
    out = []
    if comp.parts:
        out.append(Violation(1, comp.id, "layer1-has-parts"))
    if comp.orientation is None or not 0 <= comp.orientation < n:
        out.append(Violation(1, comp.id, "orientation-range", f"{comp.orientation}"))
    if comp.mean1 is None or comp.cov1 is None or len(comp.mean1) != n:
        out.append(Violation(1, comp.id, "layer1-gaussian-shape"))
    elif np.shape(comp.cov1) != (n, n) or not _is_pd(np.array(comp.cov1)):
        out.append(Violation(1, comp.id, "covariance-not-pd"))
    return out


def _validate_parts(vocab: Vocabulary, layer: Layer, comp: Composition, lower_ors: set[int], eps: float) -> list[Violation]:
    pos = layer.index
    out = []
    normal = comp.num_parts
    if not 1 <= normal <= settings.learning.max_parts:
        out.append(Violation(pos, comp.id, "part-count", f"{normal} normal parts"))
    if comp.parts:
        ref = comp.parts[0]
        if ref.is_repulsive:
            out.append(Violation(pos, comp.id, "repulsive-reference"))
        if ref.geometry.mean != (0.0, 0.0) or not np.allclose(ref.geometry.sigma, np.eye(2) * eps ** 2):
            out.append(Violation(pos, comp.id, "reference-geometry"))
    if comp.parts != canonical_parts(comp.parts):
        out.append(Violation(pos, comp.id, "part-order"))
    for k, part in enumerate(comp.parts):
        if not _is_pd(part.geometry.sigma):
            out.append(Violation(pos, comp.id, "covariance-not-pd", f"part {k}"))
        if math.hypot(*part.geometry.mean) > layer.radius + 1e-9:
            out.append(Violation(pos, comp.id, "mean-outside-radius", f"part {k}"))
        weights = part.appearance.weights
        if not weights:
            out.append(Violation(pos, comp.id, "empty-appearance", f"part {k}"))
            continue
        for or_id, w in weights.items():
            if or_id not in lower_ors:
                out.append(Violation(pos, comp.id, "dangling-reference", f"part {k} -> or{or_id}"))
            if not (w >= 0 and math.isfinite(w)):
                out.append(Violation(pos, comp.id, "negative-weight", f"part {k}"))
        nonzero = [w for w in weights.values() if w != 0]
        if pos < vocab.object_layer:
            if len(nonzero) != 1 or nonzero[0] != 1.0:
                out.append(Violation(pos, comp.id, "not-one-hot", f"part {k}"))
        elif abs(math.fsum(weights.values()) - 1.0) > _SUM_TOL:
            out.append(Violation(pos, comp.id, "not-normalized", f"part {k} sums to {math.fsum(weights.values())}"))
    return out
