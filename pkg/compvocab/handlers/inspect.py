"""inspect: layer sizes, classes, sharing and storage size of a vocabulary file."""

from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path

from compvocab.handlers.common import open_vocabulary
from compvocab.services.multiclass import deg_share
from compvocab.services.vocabulary import Vocabulary, validate

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    p = subparsers.add_parser("inspect", help="summarize a vocabulary file")
    p.add_argument("vocab", type=Path)
    p.add_argument("--json", action="store_true", help="print a JSON document instead of a table")
    p.set_defaults(func=run)


def summarize(vocab: Vocabulary, path: Path) -> dict:
    layers = []
    for idx in range(1, max(vocab.depth, vocab.object_layer) + 1):
        layer = vocab.layers[idx - 1] if idx <= vocab.depth else None
        entry = {
            "layer": idx,
            "compositions": len(layer.compositions) if layer else 0,
            "or_nodes": len(layer.or_nodes) if layer else 0,
            "deg_share": None,
        }
        if layer and len(vocab.classes) >= 2 and layer.or_nodes:
            mean, std = deg_share(vocab, idx)
            entry["deg_share"] = {"mean": mean, "std": std}
        layers.append(entry)
    return {
        "path": str(path),
        "file_size": path.stat().st_size,
        "num_orientations": vocab.num_orientations,
        "object_layer": vocab.object_layer,
        "classes": {label: list(ids) for label, ids in sorted(vocab.class_layer.items())},
        "layers": layers,
        "violations": [str(v) for v in validate(vocab)],
    }


def run(args: argparse.Namespace) -> int:
    summary = summarize(open_vocabulary(args.vocab), args.vocab)
    if args.json:
        print(json.dumps(summary, sort_keys=True, indent=2))
        return 0
    print(f"{summary['path']}: {summary['file_size']} bytes, n={summary['num_orientations']}, O={summary['object_layer']}")
    print(f"{'layer':>5} {'comps':>6} {'ors':>5}  deg_share")
    for entry in summary["layers"]:
        share = entry["deg_share"]
        share_text = f"{share['mean']:.3f} ± {share['std']:.3f}" if share else "-"
        print(f"{entry['layer']:>5} {entry['compositions']:>6} {entry['or_nodes']:>5}  {share_text}")
    for label, ids in summary["classes"].items():
        print(f"class {label}: {ids}")
    for violation in summary["violations"]:
        print(f"violation: {violation}")
    return 0
