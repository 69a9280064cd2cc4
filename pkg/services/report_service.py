"""
Report service - assembles the evaluation report.

Collects end-to-end metrics per seed, per-layer local error per timestep,
the similarity grid and sharing plan, a weight-memory estimate and process
statistics into one schema-versioned JSON-compatible dict.
"""
from __future__ import annotations

import logging
import os
import platform
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np

from core.types import LayerError, OutputMetrics
from core.utils import dt_to_iso, finite_or_none, utcnow

from .attention_share import SharingPlan, SimilarityMatrix
from .time_bank import TimeParamBank

logger = logging.getLogger("trdq.report")

SCHEMA_VERSION = 1

# Baseline weights are FP16.
BASELINE_BITS = 16
# One f16 scale plus one zero point per output channel.
CHANNEL_META_BYTES = 4


@dataclass
class SeedOutcome:
    seed: int
    metrics: OutputMetrics
    step_sqnr_db: List[float]
    reference_seconds: float
    quantized_seconds: float
    attention_executed: int
    attention_skipped: int
    layer_errors: List[LayerError] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            **self.metrics.to_dict(),
            "step_sqnr_db": [finite_or_none(v) for v in self.step_sqnr_db],
            "reference_seconds": self.reference_seconds,
            "quantized_seconds": self.quantized_seconds,
            "attention_executed": self.attention_executed,
            "attention_skipped": self.attention_skipped,
        }


def process_stats() -> Dict[str, Any]:
    stats: Dict[str, Any] = {"python": platform.python_version(), "pid": os.getpid()}
    try:
        import psutil  # type: ignore

        proc = psutil.Process(os.getpid())
        stats["rss_mb"] = float(proc.memory_info().rss / (1024 * 1024))
    except Exception as e:
        logger.warning("Process memory unavailable: %s", e)
        stats["rss_mb"] = None
    return stats


def weight_footprint(
    layer_shapes: Iterable[Tuple[int, int]],
    weight_bits: Optional[int],
    bank: Optional[TimeParamBank],
) -> Dict[str, Any]:
    """
    Weight storage estimate against an FP16 baseline.

    Every timestep group needs its own transformed weight copy, so per-step
    banks trade memory for accuracy; the bank's own factors are counted too.
    """
    shapes = list(layer_shapes)
    params = sum(rows * cols for rows, cols in shapes)
    out_channels = sum(cols for _, cols in shapes)
    copies = len(bank.grouping.groups(bank.schedule_len)) if bank is not None else 1
    bits = weight_bits if weight_bits is not None else BASELINE_BITS

    baseline = params * BASELINE_BITS // 8
    weights = copies * (params * bits // 8 + out_channels * CHANNEL_META_BYTES)
    factors = bank.parameter_bytes() if bank is not None else 0
    total = weights + factors
    return {
        "baseline_bytes": baseline,
        "weight_copies": copies,
        "quantized_weight_bytes": weights,
        "balancing_parameter_bytes": factors,
        "total_bytes": total,
        "compression_ratio": baseline / total if total else None,
    }


def aggregate_layer_errors(errors: Iterable[LayerError]) -> List[Dict[str, Any]]:
    """One row per (layer, timestep), averaged over seeds."""
    grouped: Dict[Tuple[int, int], List[LayerError]] = defaultdict(list)
    for error in errors:
        grouped[(error.layer_id, error.timestep)].append(error)
    rows = []
    for (layer_id, timestep), items in sorted(grouped.items()):
        sqnr = [e.sqnr_db for e in items]
        mean_sqnr = float(np.mean(sqnr)) if all(np.isfinite(sqnr)) else float("inf")
        row = LayerError(
            layer_id=layer_id,
            layer_name=items[0].layer_name,
            timestep=timestep,
            mse=float(np.mean([e.mse for e in items])),
            sqnr_db=mean_sqnr,
        ).to_dict()
        row["seeds"] = len(items)
        rows.append(row)
    return rows


def summarize(outcomes: List[SeedOutcome]) -> Dict[str, Any]:
    if not outcomes:
        return {}
    sqnr = np.array([o.metrics.sqnr_db for o in outcomes], dtype=np.float64)
    return {
        "seeds": len(outcomes),
        "mean_sqnr_db": finite_or_none(float(np.mean(sqnr))),
        "min_sqnr_db": finite_or_none(float(np.min(sqnr))),
        "mean_mse": float(np.mean([o.metrics.mse for o in outcomes])),
        "mean_cosine": float(np.mean([o.metrics.cosine for o in outcomes])),
        "mean_reference_seconds": float(np.mean([o.reference_seconds for o in outcomes])),
        "mean_quantized_seconds": float(np.mean([o.quantized_seconds for o in outcomes])),
        "attention_executed_per_run": outcomes[0].attention_executed,
        "attention_skipped_per_run": outcomes[0].attention_skipped,
    }


def build_report(
    *,
    config: Dict[str, Any],
    mode: Dict[str, Any],
    outcomes: List[SeedOutcome],
    similarity: Optional[SimilarityMatrix],
    plan: SharingPlan,
    footprint: Dict[str, Any],
    bank_info: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    all_errors = [e for outcome in outcomes for e in outcome.layer_errors]
    return {
        "schema_version": SCHEMA_VERSION,
        "generated_at": dt_to_iso(utcnow()),
        "config": config,
        "mode": mode,
        "bank": bank_info,
        "summary": summarize(outcomes),
        "seeds": [o.to_dict() for o in outcomes],
        "layers": aggregate_layer_errors(all_errors),
        "similarity": [
            {"block": block, "timestep": t, "cosine": value}
            for block, t, value in (similarity.rows() if similarity is not None else [])
        ],
        "sharing_plan": plan.to_dict(),
        "footprint": footprint,
        "process": process_stats(),
    }
