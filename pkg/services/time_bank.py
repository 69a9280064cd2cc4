"""
Per-timestep balancing parameters.

One BalancingParams per (layer, timestep group), calibrated from traced
activations. Timesteps run 1..N in sampling order, so t = 1 is the first
(noisiest) step. Grouping is either one group per step or k equal buckets
with bucket(t) = ceil(t * k / N).
"""
from __future__ import annotations

import logging
import re
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Tuple

import numpy as np

from core.config import ConfigError
from core.constants import Granularity, GroupingKind
from core.errors import CoverageError, DomainError, ShapeError
from core.tensor import Tensor2D
from core.types import TimestepTrace

from .quantizer import QuantConfig, QuantizedTensor, quantize
from .rotation import BalancingComponents, BalancingParams, RotationBuildConfig, assemble_balancing

logger = logging.getLogger("trdq.time_bank")

_GROUPING_RE = re.compile(r"^(?:per[-_]step|buckets:(\d+))$")

BankKey = Tuple[int, int]


@dataclass(frozen=True)
class Grouping:
    kind: int = GroupingKind.PER_STEP
    count: int = 0

    def __post_init__(self) -> None:
        if self.kind == GroupingKind.BUCKETS and self.count < 1:
            raise ConfigError("bucket count must be at least 1")
        if self.kind not in (GroupingKind.PER_STEP, GroupingKind.BUCKETS):
            raise ConfigError(f"unknown grouping kind {self.kind}")

    @classmethod
    def parse(cls, text: str) -> Grouping:
        match = _GROUPING_RE.fullmatch(text.strip().lower())
        if match is None:
            raise ConfigError(f"invalid grouping {text!r}, expected 'per-step' or 'buckets:<k>'")
        if match.group(1) is None:
            return cls(GroupingKind.PER_STEP, 0)
        return cls(GroupingKind.BUCKETS, int(match.group(1)))

    @classmethod
    def buckets(cls, count: int) -> Grouping:
        return cls(GroupingKind.BUCKETS, count)

    def format(self) -> str:
        return "per-step" if self.kind == GroupingKind.PER_STEP else f"buckets:{self.count}"

    def group_of(self, t: int, schedule_len: int) -> int:
        if not 1 <= t <= schedule_len:
            raise DomainError(f"timestep {t} outside schedule 1..{schedule_len}")
        if self.kind == GroupingKind.PER_STEP:
            return t
        # Integer ceil keeps bucket edges exact.
        return -(-t * self.count // schedule_len)

    def groups(self, schedule_len: int) -> List[int]:
        return sorted({self.group_of(t, schedule_len) for t in range(1, schedule_len + 1)})

    @property
    def is_time_agnostic(self) -> bool:
        return self.kind == GroupingKind.BUCKETS and self.count == 1


@dataclass(frozen=True, eq=False)
class TimeParamBank:
    entries: Mapping[BankKey, BalancingParams]
    grouping: Grouping
    schedule_len: int
    alpha: float
    rotation: RotationBuildConfig
    components: BalancingComponents = BalancingComponents()

    def __post_init__(self) -> None:
        if self.schedule_len < 1:
            raise DomainError("schedule length must be positive")
        object.__setattr__(self, "entries", dict(sorted(self.entries.items())))

    @property
    def layers(self) -> List[int]:
        return sorted({layer for layer, _ in self.entries})

    @property
    def block_size(self) -> int:
        return int(self.rotation.block_size)

    def entries_for(self, layer_id: int) -> int:
        return sum(1 for layer, _ in self.entries if layer == layer_id)

    def lookup(self, layer_id: int, t: int) -> BalancingParams:
        group = self.grouping.group_of(t, self.schedule_len)
        try:
            return self.entries[(layer_id, group)]
        except KeyError:
            raise CoverageError("bank has no parameters", [(layer_id, group)]) from None

    def missing(self, layer_ids: Iterable[int]) -> List[BankKey]:
        required = [(layer, group) for layer in layer_ids for group in self.grouping.groups(self.schedule_len)]
        return [key for key in required if key not in self.entries]

    def parameter_bytes(self) -> int:
        """Stored size of all factors: f64 delta and rotations, u32 permutation."""
        total = 0
        for params in self.entries.values():
            channels = params.channel_count
            total += 8 * channels + 4 * channels
            total += 8 * (params.r1.stack.size + params.r2.stack.size)
        return total


def lookup(bank: TimeParamBank, layer_id: int, t: int) -> BalancingParams:
    return bank.lookup(layer_id, t)


def calibrate_bank(
    traces: Iterable[TimestepTrace],
    weights: Mapping[int, Tensor2D],
    alpha: float,
    cfg: RotationBuildConfig,
    grouping: Grouping,
    schedule_len: int,
    components: BalancingComponents = BalancingComponents(),
) -> TimeParamBank:
    grouped: Dict[BankKey, List[TimestepTrace]] = defaultdict(list)
    for trace in traces:
        if trace.layer_id not in weights:
            continue
        group = grouping.group_of(trace.timestep, schedule_len)
        grouped[(trace.layer_id, group)].append(trace)

    required = [(layer, group) for layer in sorted(weights) for group in grouping.groups(schedule_len)]
    missing = [key for key in required if key not in grouped]
    if missing:
        raise CoverageError("calibration traces do not cover every (layer, group)", missing)

    entries: Dict[BankKey, BalancingParams] = {}
    for key in required:
        layer, group = key
        members = sorted(grouped[key], key=lambda tr: (tr.timestep, tr.branch))
        x = np.concatenate([tr.activations for tr in members], axis=0)
        w = weights[layer]
        if x.shape[1] != w.shape[0]:
            raise ShapeError(f"layer {layer}: traced {x.shape[1]} channels, weight has {w.shape[0]} rows")
        entries[key] = assemble_balancing(x, w, alpha, cfg, components)
        logger.debug("Calibrated layer %d group %d from %d rows", layer, group, x.shape[0])

    logger.info(
        "Calibrated %d entries for %d layers (%s, components=%s)",
        len(entries), len(weights), grouping.format(), ",".join(components.names()) or "none",
    )
    return TimeParamBank(
        entries=entries,
        grouping=grouping,
        schedule_len=schedule_len,
        alpha=float(alpha),
        rotation=cfg,
        components=components,
    )


def dynamic_activation_quant(x_transformed: Tensor2D, bits: int) -> QuantizedTensor:
    """Per-token s, z from the tensor's own min/max; no calibration state."""
    return quantize(x_transformed, QuantConfig(bits=bits, granularity=Granularity.PER_TOKEN, dynamic=True))
