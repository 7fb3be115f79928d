"""detect, evaluate, classify-features."""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

import numpy as np

from compvocab.config import settings
from compvocab.exceptions import EvaluationError
from compvocab.handlers.common import add_manifest_args, open_manifest, open_vocabulary, read_image
from compvocab.services.dataset import ManifestRecord
from compvocab.services.detection import classification_vector, detect, read_detections, write_detections
from compvocab.services.evaluation import ImageTruth, evaluate
from compvocab.services.feature_cache import FeatureCache
from compvocab.services.rendering import render_curves, render_detections
from compvocab.utils.io import atomic_write, parallel_map, write_json

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    p = subparsers.add_parser("detect", help="run class-layer detection over a manifest split")
    add_manifest_args(p, split="test")
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="detections file (one record per line)")
    p.add_argument("--overlays", type=Path, default=None, help="directory for detection overlay PNGs")
    p.set_defaults(func=run_detect)

    p = subparsers.add_parser("evaluate", help="score detections against manifest boxes")
    add_manifest_args(p, split="test")
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="EvalReport JSON")
    p.add_argument("--iou", type=float, default=None, help="IoU threshold (default from config)")
    p.add_argument("--fppi", type=float, default=None, help="FPPI operating point (default from config)")
    p.add_argument("--curves", type=Path, default=None, help="FPPI and precision-recall figure (.png/.svg)")
    p.set_defaults(func=run_evaluate)

    p = subparsers.add_parser("classify-features", help="export classification vectors for an external classifier")
    add_manifest_args(p, split="train")
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help=".npz with ids, labels and vectors")
    p.add_argument("--layer", type=int, default=None)
    p.set_defaults(func=run_classify)


def ground_truth(records: list[ManifestRecord]) -> list[ImageTruth]:
    return [
        ImageTruth(r.image_id, tuple((r.label, tuple(b)) for b in r.boxes) if r.label else ())
        for r in records
    ]


def run_detect(args: argparse.Namespace) -> int:
    vocab = open_vocabulary(args.vocab)
    manifest, root = open_manifest(args)
    records = manifest.select(args.split)
    cache = FeatureCache()
    overlays: list[Path] = []

    def one(record: ManifestRecord):
        image = read_image(record, root)
        found = detect(image, vocab, featurize=cache)
        if args.overlays is not None:
            truths = [tuple(b) for b in record.boxes]
            overlays.append(render_detections(image, found, args.overlays / f"{record.image_id}.png", truths))
        return record.image_id, found

    try:
        per_image = dict(parallel_map(one, records, settings.workers))
    except OSError as exc:
        for path in overlays:
            path.unlink(missing_ok=True)
        raise EvaluationError(f"cannot write overlays to {args.overlays}: {exc}") from exc
    cache.record_stats("detect")
    write_detections(args.out, per_image)
    logger.info("Detections written: %s (%d images, %d detections)", args.out, len(per_image), sum(map(len, per_image.values())))
    return 0


def run_evaluate(args: argparse.Namespace) -> int:
    manifest, _ = open_manifest(args)
    truths = ground_truth(manifest.select(args.split))
    if not truths:
        raise EvaluationError(f"split {args.split!r} of {args.manifest} is empty")
    report = evaluate(read_detections(args.detections), truths, args.iou, args.fppi)
    write_json(args.out, report.to_dict())
    if args.curves is not None:
        render_curves(report, args.curves)
    return 0


def run_classify(args: argparse.Namespace) -> int:
    vocab = open_vocabulary(args.vocab)
    manifest, root = open_manifest(args)
    records = manifest.select(args.split)
    if not records:
        raise EvaluationError(f"split {args.split!r} of {args.manifest} is empty")
    vectors = parallel_map(lambda r: classification_vector(read_image(r, root), vocab, args.layer), records, settings.workers)
    with atomic_write(args.out, "wb") as fh:
        np.savez(
            fh,
            ids=np.array([r.image_id for r in records]),
            labels=np.array([r.label or "" for r in records]),
            vectors=np.stack(vectors),
        )
    logger.info("Classification vectors written: %s (%d x %d)", args.out, len(vectors), len(vectors[0]))
    return 0
