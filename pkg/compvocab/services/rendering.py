"""Static figures: composition mean shapes, detection overlays, sharing diagram, curves."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from compvocab.exceptions import VocabularyError  # noqa: E402
from compvocab.services.detection import Detection  # noqa: E402
from compvocab.services.evaluation import EvalReport  # noqa: E402
from compvocab.services.features import contour_angle  # noqa: E402
from compvocab.services.inference import InferenceGraph, StateRef, support  # noqa: E402
from compvocab.services.multiclass import used_or_nodes  # noqa: E402
from compvocab.services.vocabulary import Vocabulary  # noqa: E402
from compvocab.utils.io import atomic_write  # noqa: E402

logger = logging.getLogger(__name__)

SEGMENT_LENGTH = 3.0  # pixels drawn per layer-1 feature
_MAX_SEGMENTS = 20000

Segment = tuple[tuple[float, float], tuple[float, float]]


def _grid_scale(vocab: Vocabulary, layer_idx: int) -> float:
    """Pixels per grid cell of layer `layer_idx`."""
    return 1.0 / math.prod(vocab.layer(k).downsample for k in range(1, layer_idx + 1))


def mean_shape(vocab: Vocabulary, comp_id: int) -> list[Segment]:
    """Layer-1 segments placed recursively at part means (first OR member per part)."""
    n = vocab.num_orientations
    segments: list[Segment] = []

    def place(cid: int, x: float, y: float) -> None:
        if len(segments) > _MAX_SEGMENTS:
            return
        comp = vocab.composition(cid)
        if comp.layer == 1:
            a = contour_angle(comp.orientation or 0, n)
            dx, dy = 0.5 * SEGMENT_LENGTH * math.cos(a), 0.5 * SEGMENT_LENGTH * math.sin(a)
            segments.append(((x - dx, y - dy), (x + dx, y + dy)))
            return
        scale = _grid_scale(vocab, comp.layer - 1)
        for part in comp.normal_parts:
            mx, my = part.geometry.mean
            member = min(vocab.or_node(part.appearance.primary).members)
            place(member, x + mx * scale, y + my * scale)

    place(comp_id, 0.0, 0.0)
    return segments


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    metadata = {"Date": None} if path.suffix == ".svg" else None
    try:
        with atomic_write(path, "wb") as fh:
            fig.savefig(fh, format=path.suffix.lstrip("."), dpi=150, bbox_inches="tight", metadata=metadata)
    finally:
        plt.close(fig)
    logger.info("Figure written: %s", path)
    return path


def render_compositions(vocab: Vocabulary, layer_idx: int, path: str | Path, columns: int = 8) -> Path:
    comps = sorted(vocab.layer(layer_idx).compositions, key=lambda c: c.id)
    if not comps:
        raise VocabularyError(f"layer {layer_idx} has no compositions to render")
    rows = math.ceil(len(comps) / columns)
    fig, axes = plt.subplots(rows, columns, figsize=(1.6 * columns, 1.6 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, comp in zip(axes.ravel(), comps):
        for (x0, y0), (x1, y1) in mean_shape(vocab, comp.id):
            ax.plot([x0, x1], [y0, y1], color="black", linewidth=1.2)
        ax.set_aspect("equal")
        ax.invert_yaxis()
        ax.set_title(str(comp.id), fontsize=7)
    fig.suptitle(f"Layer {layer_idx}")
    return _save(fig, path)


def render_detections(image: np.ndarray, detections: Sequence[Detection], path: str | Path, truths: Sequence = ()) -> Path:
    fig, ax = plt.subplots(figsize=(6, 6 * image.shape[0] / max(1, image.shape[1])))
    ax.imshow(image, cmap="gray", vmin=0, vmax=1 if image.max() <= 1 else 255)
    ax.axis("off")
    for x0, y0, x1, y1 in truths:
        ax.add_patch(Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, edgecolor="lime", linewidth=1, linestyle="--"))
    for d in detections:
        x0, y0, x1, y1 = d.box
        ax.add_patch(Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, edgecolor="red", linewidth=1.5))
        ax.text(x0, y0, f"{d.label} {d.score:.2f}", color="yellow", fontsize=7, va="bottom")
    return _save(fig, path)


def render_sharing(vocab: Vocabulary, path: str | Path) -> Path:
    """OR nodes per layer; edges to the OR nodes their members use, colored by class."""
    labels = vocab.classes
    usage = {label: used_or_nodes(vocab, label) for label in labels}
    colors = plt.get_cmap("tab10")
    pos: dict[int, tuple[float, float]] = {}
    for layer in vocab.layers:
        ids = sorted(o.id for o in layer.or_nodes)
        for k, oid in enumerate(ids):
            pos[oid] = ((k + 0.5) / max(1, len(ids)), float(layer.index))

    fig, ax = plt.subplots(figsize=(10, 1.2 * max(1, vocab.depth) + 1))
    for layer in vocab.layers[1:]:
        for node in layer.or_nodes:
            for member in node.members:
                for part in vocab.composition(member).normal_parts:
                    for lower in part.appearance.support:
                        users = [k for k, label in enumerate(labels) if node.id in usage[label] and lower in usage[label]]
                        color = colors(users[0] % 10) if len(users) == 1 else "0.6"
                        (x0, y0), (x1, y1) = pos[node.id], pos[lower]
                        ax.plot([x0, x1], [y0, y1], color=color, linewidth=0.5, alpha=0.7)
    if pos:
        xs, ys = zip(*(pos[k] for k in sorted(pos)))
        ax.scatter(xs, ys, s=8, color="black", zorder=3)
    for k, label in enumerate(labels):
        ax.plot([], [], color=colors(k % 10), label=label)
    if labels:
        ax.legend(loc="upper left", fontsize=7)
    ax.set_yticks(range(1, vocab.depth + 1))
    ax.set_ylabel("layer")
    ax.set_xticks([])
    return _save(fig, path)


def render_curves(report: EvalReport, path: str | Path) -> Path:
    fig, (ax_fppi, ax_pr) = plt.subplots(1, 2, figsize=(11, 4.5))
    for label, cls in sorted(report.classes.items()):
        fppi = [p.fppi for p in cls.curve]
        recall = [p.recall for p in cls.curve]
        precision = [p.precision for p in cls.curve]
        ax_fppi.plot(fppi, recall, drawstyle="steps-post", label=f"{label} ({cls.rate_at_fppi:.2f})")
        ax_pr.plot(recall, precision, label=f"{label} (EER {cls.recall_at_eer:.2f})")
    ax_fppi.axvline(report.fppi_target, color="0.5", linestyle=":")
    ax_fppi.set_xlabel("false positives per image")
    ax_fppi.set_ylabel("detection rate")
    ax_pr.plot([0, 1], [0, 1], color="0.7", linestyle=":")
    ax_pr.set_xlabel("recall")
    ax_pr.set_ylabel("precision")
    for ax in (ax_fppi, ax_pr):
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    fig.suptitle(f"IoU >= {report.iou_threshold}")
    return _save(fig, path)


def render_graph(image: np.ndarray, graph: InferenceGraph, path: str | Path, layer: int | None = None, top: int = 10) -> Path:
    """Supports of the `top` best pooled states of `layer` over the input image."""
    layer = graph.depth if layer is None else layer
    table = graph.table(layer, pooled=True)
    rows = sorted(range(len(table)), key=lambda r: (-float(table.scores[r]), r))[:top]
    colors = plt.get_cmap("tab10")
    fig, ax = plt.subplots(figsize=(6, 6 * image.shape[0] / max(1, image.shape[1])))
    ax.imshow(image, cmap="gray", vmin=0, vmax=1 if image.max() <= 1 else 255)
    ax.axis("off")
    for k, r in enumerate(rows):
        pts = np.array(sorted(support(graph, StateRef(layer, True, r))), dtype=np.float64)
        ax.scatter(pts[:, 0], pts[:, 1], s=3, color=colors(k % 10), label=f"{int(table.nodes[r])}: {table.scores[r]:.2f}")
    if rows:
        ax.legend(loc="upper right", fontsize=6, markerscale=3)
    ax.set_title(f"Layer {layer}, {len(table)} states")
    return _save(fig, path)
