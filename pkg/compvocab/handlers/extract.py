"""extract: images to the content-addressed feature cache."""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from compvocab.config import settings
from compvocab.handlers.common import add_manifest_args, open_manifest, read_image
from compvocab.services.dataset import Split, resolve
from compvocab.services.feature_cache import FeatureCache
from compvocab.services.features import GaborBankConfig, build_gabor_bank, dump_energy, orientation_energy
from compvocab.utils.io import parallel_map

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    p = subparsers.add_parser("extract", help="extract contour features into the cache")
    add_manifest_args(p)
    p.add_argument("--split", action="append", choices=[s.value for s in Split], help="limit to splits (repeatable)")
    p.add_argument("--dump-energy", type=Path, default=None, help="also write per-orientation energy PNGs here")
    p.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    manifest, root = open_manifest(args)
    splits = {Split(s) for s in args.split} if args.split else set(Split)
    records = [r for r in manifest.records if r.split in splits]
    cache = FeatureCache()
    bank = GaborBankConfig.from_settings()

    def one(record):
        image = read_image(record, root)
        features = cache.get_or_compute(image, source=str(resolve(record, root)))
        if args.dump_energy is not None:
            dump_energy(orientation_energy(image, build_gabor_bank(bank)), args.dump_energy, record.image_id)
        return len(features)

    counts = parallel_map(one, records, settings.workers)
    cache.record_stats("extract")
    logger.info("Extracted %d images, %d features in total", len(records), sum(counts))
    return 0
