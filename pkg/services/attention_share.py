"""
CFG attention sharing.

Compares conditional and unconditional attention probabilities per block and
timestep, decides which blocks can reuse the conditional branch's attention
for the unconditional one, and applies that decision during inference.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, FrozenSet, Iterable, List, Tuple

import numpy as np

from core.constants import Branch, SharePolicy
from core.errors import CoverageError, DomainError, ShapeError
from core.tensor import Tensor2D
from core.types import AttentionRecord

logger = logging.getLogger("trdq.attention_share")

PairKey = Tuple[int, int]

# Rounding may push a cosine a hair past +-1.
_COSINE_SLACK = 1e-9


def cosine_similarity(a: Tensor2D, b: Tensor2D) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"cosine inputs differ in shape: {a.shape} vs {b.shape}")
    flat_a = np.ravel(a)
    flat_b = np.ravel(b)
    norm_a = float(np.linalg.norm(flat_a))
    norm_b = float(np.linalg.norm(flat_b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise DomainError("cosine similarity of a zero tensor is undefined")
    value = float(flat_a @ flat_b) / (norm_a * norm_b)
    return max(-1.0, min(1.0, value))


@dataclass(frozen=True)
class SimilarityMatrix:
    values: Dict[PairKey, float]

    def __post_init__(self) -> None:
        for key, value in self.values.items():
            if not -1.0 - _COSINE_SLACK <= value <= 1.0 + _COSINE_SLACK:
                raise DomainError(f"similarity {value} at {key} outside [-1, 1]")
        object.__setattr__(self, "values", dict(sorted(self.values.items())))

    @property
    def blocks(self) -> List[int]:
        return sorted({block for block, _ in self.values})

    @property
    def timesteps(self) -> List[int]:
        return sorted({t for _, t in self.values})

    def get(self, block_id: int, t: int) -> float:
        return self.values[(block_id, t)]

    def grid(self) -> np.ndarray:
        """blocks x timesteps array; absent pairs are NaN."""
        blocks, steps = self.blocks, self.timesteps
        out = np.full((len(blocks), len(steps)), np.nan)
        row = {b: i for i, b in enumerate(blocks)}
        col = {t: j for j, t in enumerate(steps)}
        for (block, t), value in self.values.items():
            out[row[block], col[t]] = value
        return out

    def rows(self) -> List[Tuple[int, int, float]]:
        return [(block, t, value) for (block, t), value in self.values.items()]


def build_similarity_matrix(records: Iterable[AttentionRecord]) -> SimilarityMatrix:
    branches: Dict[PairKey, Dict[int, List[Tensor2D]]] = defaultdict(lambda: defaultdict(list))
    for record in records:
        branches[record.key][record.branch].append(record.attn)

    unpaired = [
        key for key, by_branch in branches.items()
        if Branch.CONDITIONAL not in by_branch or Branch.UNCONDITIONAL not in by_branch
    ]
    if unpaired:
        raise CoverageError("attention records lack a matching branch", unpaired)

    values: Dict[PairKey, float] = {}
    for key, by_branch in branches.items():
        cond = np.concatenate(by_branch[Branch.CONDITIONAL], axis=0)
        uncond = np.concatenate(by_branch[Branch.UNCONDITIONAL], axis=0)
        if cond.shape != uncond.shape:
            raise ShapeError(f"block {key[0]} step {key[1]}: branch shapes {cond.shape} vs {uncond.shape}")
        values[key] = cosine_similarity(cond, uncond)
    return SimilarityMatrix(values)


@dataclass(frozen=True)
class SharingPlan:
    shared_blocks: FrozenSet[int] = frozenset()
    threshold: float = 0.95
    policy: str = SharePolicy.ALL_TIMESTEPS
    shared_steps: FrozenSet[PairKey] = field(default_factory=frozenset)

    @classmethod
    def disabled(cls) -> SharingPlan:
        return cls(frozenset(), float("inf"))

    @classmethod
    def everything(cls, blocks: int, steps: int) -> SharingPlan:
        return cls(
            shared_blocks=frozenset(range(blocks)),
            threshold=0.0,
            shared_steps=frozenset((b, t) for b in range(blocks) for t in range(1, steps + 1)),
        )

    def is_shared(self, block_id: int, t: int) -> bool:
        if self.policy == SharePolicy.PER_TIMESTEP:
            return (block_id, t) in self.shared_steps
        return block_id in self.shared_blocks

    def skipped_per_run(self, steps: int) -> int:
        if self.policy == SharePolicy.PER_TIMESTEP:
            return sum(1 for _, t in self.shared_steps if 1 <= t <= steps)
        return len(self.shared_blocks) * steps

    def to_dict(self) -> dict[str, Any]:
        return {
            "shared_blocks": sorted(self.shared_blocks),
            "threshold": self.threshold if np.isfinite(self.threshold) else None,
            "policy": self.policy,
            "shared_steps": [list(key) for key in sorted(self.shared_steps)],
        }


def derive_sharing_plan(
    sim: SimilarityMatrix,
    threshold: float,
    policy: str = SharePolicy.ALL_TIMESTEPS,
) -> SharingPlan:
    if not threshold > 0.0:
        raise DomainError(f"sharing threshold must be positive, got {threshold}")
    if policy not in (SharePolicy.ALL_TIMESTEPS, SharePolicy.PER_TIMESTEP):
        raise DomainError(f"unknown sharing policy {policy!r}")

    passing = frozenset(key for key, value in sim.values.items() if value >= threshold)
    steps = sim.timesteps
    shared_blocks = frozenset(
        block for block in sim.blocks
        if all((block, t) in passing for t in steps)
    )
    logger.info(
        "Sharing plan at %.4f (%s): %d/%d blocks shared at every step",
        threshold, policy, len(shared_blocks), len(sim.blocks),
    )
    return SharingPlan(shared_blocks=shared_blocks, threshold=float(threshold), policy=policy, shared_steps=passing)


def apply_sharing(
    plan: SharingPlan,
    block_id: int,
    t: int,
    cond_attn: Tensor2D,
    uncond_attn_fn: Callable[[], Tensor2D],
) -> Tuple[Tensor2D, bool]:
    """Return the attention the unconditional branch uses and whether it was computed."""
    if plan.is_shared(block_id, t):
        return cond_attn, False
    return uncond_attn_fn(), True
