"""
trace - capture calibration traces from reference denoising runs.
"""
from __future__ import annotations

import argparse
import asyncio
import logging
from pathlib import Path

from core.constants import K
from core.errors import EXIT_OK
from core.trace_storage import TraceSet, save_traces
from model.toy_dit import calibration_inputs, capture_traces

from .common import add_model_flags, model_config, resolve_config

logger = logging.getLogger("trdq.cli.trace")


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("trace", help="capture layer and attention traces")
    add_model_flags(parser)
    parser.add_argument("--conditions", type=int, default=None, help="calibration runs (distinct conditions)")
    parser.add_argument("--calib-seed", type=int, default=None, help="first calibration seed")
    parser.add_argument("--out", required=True, help="trace file to write")
    parser.set_defaults(handler=handle_command)


async def handle_command(args: argparse.Namespace) -> int:
    cfg = await resolve_config(args, {K.CALIB_CONDITIONS: args.conditions, K.CALIB_SEED: args.calib_seed})
    model_cfg = model_config(cfg)
    conditions, seeds = calibration_inputs(model_cfg, cfg[K.CALIB_CONDITIONS], cfg[K.CALIB_SEED])

    capture = await asyncio.to_thread(capture_traces, model_cfg, conditions, seeds)
    size = await save_traces(Path(args.out), TraceSet(capture.traces, capture.attention))
    logger.info("Trace capture done: %d runs, %d bytes", len(seeds), size)
    return EXIT_OK
