"""
attn-sim - cond/uncond attention similarity grid from a trace file.
"""
from __future__ import annotations

import argparse
import logging
from pathlib import Path

from core.errors import EXIT_OK
from core.io_utils import write_bytes_atomic, write_text_atomic
from core.trace_storage import load_traces
from services.attention_share import SimilarityMatrix, build_similarity_matrix
from services.render_service import render_heatmap

logger = logging.getLogger("trdq.cli.attn_sim")

CSV_HEADER = "block,timestep,cosine"


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("attn-sim", help="export the attention similarity grid")
    parser.add_argument("--traces", required=True, help="trace file from 'trace'")
    parser.add_argument("--out", required=True, help="CSV file to write")
    parser.add_argument("--png", default=None, help="optional heat-map image")
    parser.set_defaults(handler=handle_command)


def similarity_csv(sim: SimilarityMatrix) -> str:
    lines = [CSV_HEADER]
    lines.extend(f"{block},{t},{value!r}" for block, t, value in sim.rows())
    return "\n".join(lines) + "\n"


async def handle_command(args: argparse.Namespace) -> int:
    trace_set = await load_traces(Path(args.traces))
    sim = build_similarity_matrix(trace_set.attention)
    await write_text_atomic(Path(args.out), similarity_csv(sim))
    if args.png:
        await write_bytes_atomic(Path(args.png), await render_heatmap(sim))
    logger.info("Similarity grid: %d blocks x %d timesteps", len(sim.blocks), len(sim.timesteps))
    return EXIT_OK
