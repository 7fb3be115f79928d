"""Shared argument helpers for the command handlers."""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

import numpy as np

from compvocab.services import vocab_store
from compvocab.services.dataset import Manifest, ManifestRecord, load_manifest, resolve
from compvocab.services.features import load_image
from compvocab.services.vocabulary import Vocabulary

logger = logging.getLogger(__name__)


def add_manifest_args(parser: argparse.ArgumentParser, split: str | None = None) -> None:
    parser.add_argument("--manifest", type=Path, required=True, help="dataset manifest (JSON)")
    parser.add_argument(
        "--root", type=Path, default=None,
        help="directory image paths are relative to (default: the manifest's directory)",
    )
    if split is not None:
        parser.add_argument("--split", default=split, choices=["natural", "train", "validation", "test"])


def open_manifest(args: argparse.Namespace) -> tuple[Manifest, Path]:
    manifest = load_manifest(args.manifest)
    root = args.root if args.root is not None else args.manifest.parent
    return manifest, root


def read_image(record: ManifestRecord, root: Path) -> np.ndarray:
    return load_image(resolve(record, root))


def open_vocabulary(path: Path) -> Vocabulary:
    return vocab_store.load(path)
