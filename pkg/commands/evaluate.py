"""
eval - reference vs fake-quantized denoising over several seeds.

Without --ablate the bank is used as stored. With --ablate the bank is
recalibrated in memory from fresh calibration traces using the stored
header settings, so every ablation row is calibrated rather than masked;
ablating 'tr' collapses the grouping to a single bucket.
"""
from __future__ import annotations

import argparse
import asyncio
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from core.bank_storage import load_bank
from core.config import DEPLOYABLE_BITS, ConfigError
from core.constants import K, SharePolicy
from core.errors import EXIT_OK
from core.io_utils import write_json_atomic
from core.trace_storage import load_traces
from model.toy_dit import (
    CaptureResult,
    LayerMode,
    ToyDiT,
    calibration_inputs,
    capture_traces,
    condition_for_seed,
    evaluate,
    run_denoise,
)
from services.attention_share import build_similarity_matrix, derive_sharing_plan
from services.quantizer import error_metrics
from services.report_service import SeedOutcome, build_report, weight_footprint
from services.time_bank import Grouping, TimeParamBank, calibrate_bank

from .common import add_model_flags, model_config, parse_ablation, resolve_config, rotation_config

logger = logging.getLogger("trdq.cli.eval")


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("eval", help="evaluate quantized denoising against the reference")
    add_model_flags(parser)
    parser.add_argument("--bank", default=None, help="bank file from 'calibrate'")
    parser.add_argument("--traces", default=None, help="reuse a trace file instead of recapturing")
    parser.add_argument("--wbits", type=int, choices=DEPLOYABLE_BITS, default=None, help="weight bits")
    parser.add_argument("--abits", type=int, choices=DEPLOYABLE_BITS, default=None, help="activation bits")
    parser.add_argument("--ablate", default="", help="comma list of smooth,r1,p,r2,tr to disable")
    parser.add_argument("--share-threshold", type=float, default=None, help="attention-sharing cosine threshold")
    parser.add_argument(
        "--share-policy",
        choices=(SharePolicy.ALL_TIMESTEPS, SharePolicy.PER_TIMESTEP),
        default=None,
        help="share blocks at every step, or per (block, step)",
    )
    parser.add_argument("--seeds", type=int, default=None, help="evaluation seeds")
    parser.add_argument("--seed-base", type=int, default=None, help="first evaluation seed")
    parser.add_argument("--conditions", type=int, default=None, help="calibration runs when recapturing")
    parser.add_argument("--calib-seed", type=int, default=None, help="first calibration seed when recapturing")
    parser.add_argument("--out", required=True, help="report JSON to write")
    parser.set_defaults(handler=handle_command)


def _recalibrate(
    capture: CaptureResult,
    model: ToyDiT,
    mode: LayerMode,
    source: Optional[TimeParamBank],
    cfg: Dict[str, Any],
) -> TimeParamBank:
    if source is not None:
        alpha, rotation, grouping = source.alpha, source.rotation, source.grouping
    else:
        alpha, rotation, grouping = cfg[K.ALPHA], rotation_config(cfg), Grouping.parse(cfg[K.GROUPING])
    if not mode.time_rotation:
        grouping = Grouping.buckets(1)
    logger.info(
        "Recalibrating in memory: components=%s grouping=%s",
        ",".join(mode.components.names()) or "none", grouping.format(),
    )
    return calibrate_bank(
        capture.traces,
        model.layer_weights(),
        alpha,
        rotation,
        grouping,
        model.cfg.steps,
        mode.components,
    )


async def handle_command(args: argparse.Namespace) -> int:
    cfg = await resolve_config(args, {
        K.WEIGHT_BITS: args.wbits,
        K.ACT_BITS: args.abits,
        K.SHARE_THRESHOLD: args.share_threshold,
        K.SHARE_POLICY: args.share_policy,
        K.EVAL_SEEDS: args.seeds,
        K.EVAL_SEED_BASE: args.seed_base,
        K.CALIB_CONDITIONS: args.conditions,
        K.CALIB_SEED: args.calib_seed,
    })
    model_cfg = model_config(cfg)
    model = ToyDiT(model_cfg)
    ablated = parse_ablation(args.ablate)
    mode = LayerMode.from_ablation(cfg[K.WEIGHT_BITS], cfg[K.ACT_BITS], ablated)

    bank: Optional[TimeParamBank] = await load_bank(Path(args.bank)) if args.bank else None
    if bank is None and mode.components.rotates:
        raise ConfigError("--bank is required unless r1, p and r2 are all ablated")

    if args.traces:
        trace_set = await load_traces(Path(args.traces))
        capture = CaptureResult(trace_set.traces, trace_set.attention)
    else:
        conditions, seeds = calibration_inputs(model_cfg, cfg[K.CALIB_CONDITIONS], cfg[K.CALIB_SEED])
        capture = await asyncio.to_thread(capture_traces, model_cfg, conditions, seeds)

    source = "file"
    if mode.needs_bank and (bank is None or ablated):
        bank = await asyncio.to_thread(_recalibrate, capture, model, mode, bank, cfg)
        source = "recalibrated"
    active_bank = bank if mode.needs_bank else None

    similarity = build_similarity_matrix(capture.attention)
    plan = derive_sharing_plan(similarity, cfg[K.SHARE_THRESHOLD], cfg[K.SHARE_POLICY])

    async def run_seed(seed: int) -> SeedOutcome:
        condition = condition_for_seed(seed, model_cfg.dim)
        ref, quant = await asyncio.gather(
            asyncio.to_thread(run_denoise, model, LayerMode.reference(), None, None, condition, seed),
            asyncio.to_thread(run_denoise, model, mode, active_bank, plan, condition, seed, record_errors=True),
        )
        return SeedOutcome(
            seed=seed,
            metrics=evaluate(ref.latent, quant.latent),
            step_sqnr_db=[error_metrics(r, q).sqnr_db for r, q in zip(ref.intermediates, quant.intermediates)],
            reference_seconds=ref.wall_time,
            quantized_seconds=quant.wall_time,
            attention_executed=quant.attention_executed,
            attention_skipped=quant.attention_skipped,
            layer_errors=quant.layer_errors,
        )

    seeds = [cfg[K.EVAL_SEED_BASE] + i for i in range(cfg[K.EVAL_SEEDS])]
    outcomes: List[SeedOutcome] = list(await asyncio.gather(*(run_seed(s) for s in seeds)))

    bank_info = None
    if active_bank is not None:
        bank_info = {
            "source": source,
            "grouping": active_bank.grouping.format(),
            "entries": len(active_bank.entries),
            "alpha": active_bank.alpha,
            "block_size": active_bank.block_size,
            "components": active_bank.components.names(),
        }
    report = build_report(
        config={**cfg, "ablate": sorted(ablated)},
        mode={
            "label": mode.label,
            "weight_bits": mode.weight_bits,
            "act_bits": mode.act_bits,
            "components": mode.components.names(),
            "time_rotation": mode.time_rotation,
        },
        outcomes=outcomes,
        similarity=similarity,
        plan=plan,
        footprint=weight_footprint(
            [w.shape for w in model.layer_weights().values()], mode.weight_bits, active_bank,
        ),
        bank_info=bank_info,
    )
    await write_json_atomic(Path(args.out), report)
    summary = report["summary"]
    logger.info(
        "%s over %d seeds: mean SQNR %s dB, cosine %.6f",
        mode.label, len(outcomes), summary.get("mean_sqnr_db"), summary.get("mean_cosine", float("nan")),
    )
    return EXIT_OK
