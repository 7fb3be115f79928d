"""render: composition shapes, sharing diagram, graph overlays, graph dumps."""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from compvocab.exceptions import InferenceError
from compvocab.handlers.common import open_vocabulary
from compvocab.services.features import load_image
from compvocab.services.inference import dump_graph, infer
from compvocab.services.rendering import render_compositions, render_graph, render_sharing
from compvocab.utils.io import write_json

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    p = subparsers.add_parser("render", help="static figures of a vocabulary")
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--layer", type=int, action="append", help="layers to draw (default: all)")
    p.add_argument("--sharing", action="store_true", help="also draw the class sharing diagram")
    p.add_argument("--image", type=Path, default=None, help="overlay the parse of this image")
    p.add_argument("--graph-layer", type=int, default=None, help="layer whose supports are overlaid")
    p.add_argument("--format", choices=["png", "svg"], default="png")
    p.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    vocab = open_vocabulary(args.vocab)
    ext = args.format
    layers = args.layer or [k for k in range(1, vocab.depth + 1) if vocab.layer(k).compositions]
    for idx in layers:
        render_compositions(vocab, idx, args.out / f"layer{idx}.{ext}")
    if args.sharing:
        render_sharing(vocab, args.out / f"sharing.{ext}")
    if args.image is not None:
        depth = args.graph_layer or vocab.depth
        if depth < 1:
            raise InferenceError("vocabulary has no layers to parse with")
        image = load_image(args.image)
        graph = infer(image, vocab, depth)
        render_graph(image, graph, args.out / f"{args.image.stem}_graph.{ext}", depth)
        write_json(args.out / f"{args.image.stem}_graph.json", dump_graph(graph))
    return 0
