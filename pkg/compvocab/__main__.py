"""Pipeline entry point: python -m compvocab"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from collections.abc import Sequence
from pathlib import Path

from sqlalchemy.exc import SQLAlchemyError

from compvocab import __version__
from compvocab.config import apply_settings, load_settings, settings
from compvocab.db.session import session_scope
from compvocab.exceptions import CompvocabError
from compvocab.handlers import get_all_commands
from compvocab.utils.analytics import log_event

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
)
logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="compvocab",
        description="Learn a compositional shape vocabulary and detect objects with it.",
    )
    parser.add_argument("--config", type=Path, default=None, help="JSON config file")
    parser.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--seed", type=int, default=None, help="global seed (overrides config)")
    parser.add_argument("--workers", type=int, default=None, help="image-level worker threads")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="<command>")
    for command in get_all_commands():
        command.register(subparsers)
    return parser


def _record(event_type: str, metadata: dict) -> None:
    try:
        with session_scope() as session:
            log_event(session, event_type, metadata)
    except SQLAlchemyError as exc:
        logger.warning("Event %s not recorded: %s", event_type, exc)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        apply_settings(load_settings(
            args.config, seed=args.seed, workers=args.workers, log_level=args.log_level,
        ))
    except CompvocabError as exc:
        logger.error("%s", exc)
        return 1
    logging.getLogger().setLevel(settings.log_level)

    started = time.perf_counter()
    _record("command_started", {"command": args.command})
    try:
        status = args.func(args)
    except (CompvocabError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        _record("command_failed", {"command": args.command, "error": type(exc).__name__})
        return 1
    elapsed = time.perf_counter() - started
    _record("command_finished", {"command": args.command, "seconds": round(elapsed, 3)})
    logger.info("%s finished in %.1fs", args.command, elapsed)
    return status


if __name__ == "__main__":
    sys.exit(main())
