"""
Main entry point for the quantization pipeline CLI.

Subcommands: trace, calibrate, eval, attn-sim. Pipeline settings come from
config.default.json, an optional --config file and flags; the environment
only supplies LOG_LEVEL.
"""
from __future__ import annotations

import argparse
import asyncio
import logging
import os
import sys
from pathlib import Path
from typing import List, NoReturn, Optional

from dotenv import load_dotenv

# Load environment variables from .env file
env_path = Path(__file__).parent / ".env"
load_dotenv(env_path)

from commands import attn_sim, calibrate, evaluate, trace
from core.errors import EXIT_CONFIG, EXIT_IO, TrdqError

logger = logging.getLogger("trdq.cli")


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the config/usage code instead of argparse's 2."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def configure_logging(level_name: Optional[str]) -> None:
    name = (level_name or os.getenv("LOG_LEVEL", "INFO")).upper()
    level = getattr(logging, name, logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    logging.getLogger().setLevel(level)
    # Keep these quieter unless explicitly debugging.
    if level > logging.DEBUG:
        logging.getLogger("PIL").setLevel(logging.WARNING)
    else:
        logging.getLogger("PIL").setLevel(level)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trdq", description="Time-aware rotation + smoothing post-training quantization.")
    parser.add_argument("--config", default=None, help="JSON file overriding config.default.json")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (overrides LOG_LEVEL)")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for command in (trace, calibrate, evaluate, attn_sim):
        command.register(subparsers)
    return parser


async def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging(args.log_level)
    try:
        return await args.handler(args)
    except TrdqError as e:
        logger.error("%s: %s", args.command, e)
        return e.exit_code
    except OSError as e:
        logger.error("%s: I/O failure: %s", args.command, e)
        return EXIT_IO


if __name__ == "__main__":
    try:
        sys.exit(asyncio.run(main()))
    except KeyboardInterrupt:
        pass
