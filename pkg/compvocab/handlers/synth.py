"""synth: write the synthetic shape corpus."""

from __future__ import annotations

import argparse
from pathlib import Path

from compvocab.config import settings
from compvocab.services.synth import generate_corpus


def register(subparsers) -> None:
    p = subparsers.add_parser("synth", help="generate the synthetic natural + shape-class corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--natural", type=int, default=200)
    p.add_argument("--train", type=int, default=20)
    p.add_argument("--validation", type=int, default=10)
    p.add_argument("--test", type=int, default=20)
    p.add_argument("--size", type=int, nargs=2, default=(160, 160), metavar=("W", "H"))
    p.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    generate_corpus(
        args.out,
        classes=args.classes,
        natural=args.natural,
        train=args.train,
        validation=args.validation,
        test=args.test,
        size=tuple(args.size),
        seed=settings.seed,
    )
    return 0
