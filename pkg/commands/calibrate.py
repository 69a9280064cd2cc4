"""
calibrate - build a per-timestep parameter bank from a trace file.
"""
from __future__ import annotations

import argparse
import asyncio
import logging
from pathlib import Path

from core.bank_storage import save_bank
from core.constants import K
from core.errors import EXIT_OK
from core.trace_storage import load_traces
from model.toy_dit import ToyDiT
from services.time_bank import Grouping, calibrate_bank

from .common import add_model_flags, model_config, resolve_config, rotation_config

logger = logging.getLogger("trdq.cli.calibrate")


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("calibrate", help="calibrate balancing parameters per timestep")
    add_model_flags(parser)
    parser.add_argument("--traces", required=True, help="trace file from 'trace'")
    parser.add_argument("--alpha", type=float, default=None, help="smoothing migration strength")
    parser.add_argument("--block-size", type=int, default=None, help="rotation block size (power of two)")
    parser.add_argument("--grouping", default=None, help="'per-step' or 'buckets:<k>'")
    parser.add_argument("--seed", type=int, default=None, help="rotation construction seed")
    parser.add_argument("--max-greedy-steps", type=int, default=None, help="greedy rotation chain cap")
    parser.add_argument("--stop-tol", type=float, default=None, help="greedy relative-improvement stop")
    parser.add_argument("--out", required=True, help="bank file to write")
    parser.set_defaults(handler=handle_command)


async def handle_command(args: argparse.Namespace) -> int:
    cfg = await resolve_config(args, {
        K.ALPHA: args.alpha,
        K.BLOCK_SIZE: args.block_size,
        K.GROUPING: args.grouping,
        K.ROTATION_SEED: args.seed,
        K.MAX_GREEDY_STEPS: args.max_greedy_steps,
        K.STOP_TOL: args.stop_tol,
    })
    model_cfg = model_config(cfg)
    trace_set = await load_traces(Path(args.traces))
    model = ToyDiT(model_cfg)

    bank = await asyncio.to_thread(
        calibrate_bank,
        trace_set.traces,
        model.layer_weights(),
        cfg[K.ALPHA],
        rotation_config(cfg),
        Grouping.parse(cfg[K.GROUPING]),
        model_cfg.steps,
    )
    await save_bank(Path(args.out), bank)
    logger.info("Calibration done: %d entries across %d layers", len(bank.entries), len(bank.layers))
    return EXIT_OK
