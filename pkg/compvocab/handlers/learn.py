"""learn-generic, learn-layer, learn-class, thresholds."""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from compvocab.config import settings
from compvocab.exceptions import DatasetError
from compvocab.handlers.common import add_manifest_args, open_manifest, open_vocabulary, read_image
from compvocab.services import vocab_store
from compvocab.services.dataset import Split, class_dataset, resolve
from compvocab.services.feature_cache import FeatureCache
from compvocab.services.multiclass import learn_class, learn_generic, learn_single_layer, learn_thresholds
from compvocab.utils.io import parallel_map, write_json

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    p = subparsers.add_parser("learn-generic", help="learn layers 1-3 from unlabeled (natural) images")
    add_manifest_args(p)
    p.add_argument("--out", type=Path, required=True, help="vocabulary file to write")
    p.add_argument("--limit", type=int, default=None, help="use at most this many natural images")
    p.add_argument("--report", type=Path, default=None, help="training report (JSON)")
    p.add_argument("--artifacts", type=Path, default=None, help="store or resume per-layer learning artifacts here")
    p.set_defaults(func=run_generic)

    p = subparsers.add_parser("learn-layer", help="grow one generic layer, resuming from stored artifacts")
    add_manifest_args(p)
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--artifacts", type=Path, required=True, help="directory for histograms, duplets and candidate pools")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", type=Path, default=None, help="output vocabulary (default: overwrite --vocab)")
    p.set_defaults(func=run_layer)

    p = subparsers.add_parser("learn-class", help="append classes (layers 4..O and the class layer)")
    add_manifest_args(p)
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--label", action="append", required=True, help="class to add (repeatable, learned in order)")
    p.add_argument("--out", type=Path, default=None, help="output vocabulary (default: overwrite --vocab)")
    p.add_argument("--report", type=Path, default=None)
    p.set_defaults(func=run_class)

    p = subparsers.add_parser("thresholds", help="learn per-composition pruning thresholds")
    add_manifest_args(p)
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--safety", type=float, default=None, help="safety fraction (default from config)")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=run_thresholds)


def _natural_features(args: argparse.Namespace, cache: FeatureCache):
    manifest, root = open_manifest(args)
    records = manifest.select(Split.NATURAL)[:args.limit]
    if not records:
        raise DatasetError(f"{args.manifest} has no natural images")
    return parallel_map(
        lambda r: cache.get_or_compute(read_image(r, root), source=str(resolve(r, root))),
        records, settings.workers,
    )


def run_generic(args: argparse.Namespace) -> int:
    cache = FeatureCache()
    features = _natural_features(args, cache)
    vocab, report = learn_generic(features, artifacts_dir=args.artifacts)
    vocab_store.save(vocab, args.out)
    if args.report:
        write_json(args.report, report.to_dict())
    cache.record_stats("learn-generic")
    return 0


def run_class(args: argparse.Namespace) -> int:
    manifest, root = open_manifest(args)
    vocab = open_vocabulary(args.vocab)
    cache = FeatureCache()
    reports = []
    for label in args.label:
        reports.append(learn_class(vocab, class_dataset(manifest, label, root), featurize=cache).to_dict())
    vocab_store.save(vocab, args.out or args.vocab)
    if args.report:
        write_json(args.report, reports)
    cache.record_stats("learn-class")
    return 0


def run_thresholds(args: argparse.Namespace) -> int:
    manifest, root = open_manifest(args)
    vocab = open_vocabulary(args.vocab)
    datasets = [class_dataset(manifest, label, root) for label in vocab.classes]
    thresholds = learn_thresholds(vocab, datasets, args.safety, featurize=FeatureCache())
    vocab_store.save(vocab, args.out or args.vocab)
    logger.info("Wrote %d thresholds", len(thresholds))
    return 0


def run_layer(args: argparse.Namespace) -> int:
    vocab = open_vocabulary(args.vocab)
    cache = FeatureCache()
    report = learn_single_layer(vocab, _natural_features(args, cache), args.layer, artifacts_dir=args.artifacts)
    vocab_store.save(vocab, args.out or args.vocab)
    write_json(args.artifacts / f"layer{args.layer}_report.json", vars(report))
    cache.record_stats("learn-layer")
    return 0
