"""
Balancing transforms: block-diagonal rotations and the zigzag permutation.

Activations go through G(x) = ((x / delta) @ R1)[:, p] @ R2 and weights
through the inverse chain H(w) = R2^T @ (R1^T @ (delta * w))[p, :], so
G(x) @ H(w) == x @ w up to rounding.

Each rotation is block-diagonal with K blocks of 2^n channels. A block is
built greedily: every step swaps the current worst column to the front,
applies an orthogonal matrix whose first row is uniform (spreading that
column evenly over the block) and swaps back. The chain prefix with the
smallest max-abs wins, the empty prefix included.

The second rotation is also checked against the weights it is folded into:
a block whose rotation widens the per-output-channel weight ranges is reset to
the identity.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from core.config import SEED_LIMIT, ConfigError
from core.constants import Component
from core.errors import ShapeError
from core.tensor import PermutationVector, Tensor2D, apply_permutation
from core.utils import is_power_of_two

from .smoothing import SmoothingDiag, compute_delta, smooth_activations, smooth_weights

logger = logging.getLogger("trdq.rotation")

# Gram-Schmidt residuals below this are treated as linearly dependent.
_DEPENDENCE_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class RotationBlock:
    matrix: npt.NDArray[np.float64]

    def __post_init__(self) -> None:
        matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ShapeError(f"rotation block must be square, got {matrix.shape}")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)

    @classmethod
    def identity(cls, size: int) -> RotationBlock:
        return cls(np.eye(size, dtype=np.float64))

    @property
    def size(self) -> int:
        return int(self.matrix.shape[0])

    def orthogonality_error(self) -> float:
        return float(np.abs(self.matrix @ self.matrix.T - np.eye(self.size)).max())


@dataclass(frozen=True, eq=False)
class BlockRotation:
    """BlockDiag(R_1, ..., R_K) kept as a (K, size, size) stack."""
    blocks: Tuple[RotationBlock, ...]
    stack: npt.NDArray[np.float64] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        blocks = tuple(self.blocks)
        if not blocks:
            raise ShapeError("block rotation needs at least one block")
        sizes = {block.size for block in blocks}
        if len(sizes) != 1:
            raise ShapeError(f"rotation blocks differ in size: {sorted(sizes)}")
        stack = np.stack([block.matrix for block in blocks])
        stack.setflags(write=False)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "stack", stack)

    @classmethod
    def identity(cls, channels: int, block_size: int) -> BlockRotation:
        if block_size < 1 or channels % block_size != 0:
            raise ShapeError(f"block size {block_size} does not divide {channels} channels")
        return cls(tuple(RotationBlock.identity(block_size) for _ in range(channels // block_size)))

    @property
    def block_size(self) -> int:
        return self.blocks[0].size

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    @property
    def channel_count(self) -> int:
        return self.block_count * self.block_size

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.stack, np.broadcast_to(np.eye(self.block_size), self.stack.shape)))

    def densify(self) -> Tensor2D:
        size = self.block_size
        dense = np.zeros((self.channel_count, self.channel_count), dtype=np.float64)
        for k, block in enumerate(self.blocks):
            dense[k * size:(k + 1) * size, k * size:(k + 1) * size] = block.matrix
        return dense

    def rotate_columns(self, x: Tensor2D) -> Tensor2D:
        """x @ R."""
        if x.shape[1] != self.channel_count:
            raise ShapeError(f"rotation over {self.channel_count} channels applied to {x.shape[1]} columns")
        rows = x.shape[0]
        blocked = x.reshape(rows, self.block_count, self.block_size)
        return np.einsum("tki,kij->tkj", blocked, self.stack).reshape(rows, self.channel_count)

    def rotate_rows_transposed(self, w: Tensor2D) -> Tensor2D:
        """R^T @ w."""
        if w.shape[0] != self.channel_count:
            raise ShapeError(f"rotation over {self.channel_count} channels applied to {w.shape[0]} rows")
        cols = w.shape[1]
        blocked = w.reshape(self.block_count, self.block_size, cols)
        return np.einsum("kji,kjo->kio", self.stack, blocked).reshape(self.channel_count, cols)


@dataclass(frozen=True)
class RotationBuildConfig:
    block_size: int = 16
    max_greedy_steps: int = 8
    rng_seed: int = 0
    stop_tol: float = 1e-3

    def __post_init__(self) -> None:
        if not is_power_of_two(int(self.block_size)):
            raise ConfigError(f"block_size must be a power of two, got {self.block_size}")
        if int(self.max_greedy_steps) < 1:
            raise ConfigError("max_greedy_steps must be at least 1")
        if self.stop_tol < 0:
            raise ConfigError("stop_tol must be non-negative")
        if not 0 <= int(self.rng_seed) < SEED_LIMIT:
            raise ConfigError(f"rng_seed must be in [0, 2**64), got {self.rng_seed}")


@dataclass(frozen=True)
class BalancingComponents:
    smooth: bool = True
    r1: bool = True
    p: bool = True
    r2: bool = True

    @classmethod
    def from_ablation(cls, ablated: Iterable[str]) -> BalancingComponents:
        off = set(ablated)
        return cls(
            smooth=Component.SMOOTH not in off,
            r1=Component.R1 not in off,
            p=Component.P not in off,
            r2=Component.R2 not in off,
        )

    @property
    def mask(self) -> int:
        return int(self.smooth) | int(self.r1) << 1 | int(self.p) << 2 | int(self.r2) << 3

    @classmethod
    def from_mask(cls, mask: int) -> BalancingComponents:
        return cls(smooth=bool(mask & 1), r1=bool(mask & 2), p=bool(mask & 4), r2=bool(mask & 8))

    @property
    def rotates(self) -> bool:
        return self.r1 or self.p or self.r2

    def names(self) -> List[str]:
        flags = ((Component.SMOOTH, self.smooth), (Component.R1, self.r1), (Component.P, self.p), (Component.R2, self.r2))
        return [name for name, on in flags if on]


@dataclass(frozen=True, eq=False)
class BalancingParams:
    delta: SmoothingDiag
    r1: BlockRotation
    p: PermutationVector
    r2: BlockRotation

    def __post_init__(self) -> None:
        sizes = {len(self.delta), self.r1.channel_count, len(self.p), self.r2.channel_count}
        if len(sizes) != 1:
            raise ShapeError(f"balancing factors disagree on channel count: {sorted(sizes)}")

    @classmethod
    def identity(cls, channels: int, block_size: int, alpha: float = 0.5) -> BalancingParams:
        return cls(
            delta=SmoothingDiag.identity(channels, alpha),
            r1=BlockRotation.identity(channels, block_size),
            p=PermutationVector.identity(channels),
            r2=BlockRotation.identity(channels, block_size),
        )

    @property
    def channel_count(self) -> int:
        return len(self.delta)

    @property
    def block_size(self) -> int:
        return self.r1.block_size


@dataclass(frozen=True)
class GreedyResult:
    block: RotationBlock
    steps_taken: int
    chain_length: int
    max_abs_history: Tuple[float, ...]


def _uniform_first_row_basis(size: int, seed: int) -> Tensor2D:
    """Orthogonal matrix with first row 1/sqrt(d), rest seeded and completed by MGS."""
    rng = np.random.default_rng(seed)
    basis = np.empty((size, size), dtype=np.float64)
    basis[0] = 1.0 / np.sqrt(size)
    for i in range(1, size):
        while True:
            v = rng.standard_normal(size)
            for _ in range(2):
                for j in range(i):
                    v -= (basis[j] @ v) * basis[j]
            norm = float(np.linalg.norm(v))
            if norm > _DEPENDENCE_TOL:
                break
        basis[i] = v / norm
    return basis


def _swap_index(size: int, column: int) -> npt.NDArray[np.intp]:
    index = np.arange(size, dtype=np.intp)
    index[0], index[column] = column, 0
    return index


def build_single_rotation(x_block: Tensor2D, seed: int) -> RotationBlock:
    size = x_block.shape[1]
    if size == 1:
        return RotationBlock.identity(1)
    # Lowest index wins ties.
    column = int(np.argmax(np.abs(x_block).max(axis=0))) if x_block.size else 0
    q = _uniform_first_row_basis(size, seed)
    # C1 @ Q @ C2 with C1 = C2 the 0 <-> column swap.
    swap = _swap_index(size, column)
    return RotationBlock(q[swap][:, swap])


def _step_seed(rng_seed: int, block_index: int, step: int) -> int:
    sequence = np.random.SeedSequence([int(rng_seed), int(block_index), int(step)])
    return int(sequence.generate_state(1)[0])


def greedy_rotation(x_block: Tensor2D, cfg: RotationBuildConfig, block_index: int = 0) -> GreedyResult:
    """Chain up to max_greedy_steps single rotations and keep the best prefix.

    The empty prefix (identity) is a candidate too, so the result never has a
    larger max-abs than x_block itself. Inputs with no outlier to chase, such
    as a constant block, come back as the identity with chain_length 0.
    """
    size = x_block.shape[1]
    accumulated = np.eye(size, dtype=np.float64)
    current = x_block
    best_max = float(np.abs(x_block).max()) if x_block.size else 0.0
    best_matrix = accumulated
    chain_length = 0
    history = [best_max]

    if best_max == 0.0 or size == 1:
        return GreedyResult(RotationBlock(best_matrix), 0, 0, tuple(history))

    steps_taken = 0
    for step in range(int(cfg.max_greedy_steps)):
        single = build_single_rotation(current, _step_seed(cfg.rng_seed, block_index, step))
        accumulated = accumulated @ single.matrix
        current = x_block @ accumulated
        value = float(np.abs(current).max())
        previous = history[-1]
        history.append(value)
        steps_taken += 1
        if value < best_max:
            best_max = value
            best_matrix = accumulated
            chain_length = step + 1
        if value == 0.0 or (previous - value) / previous < cfg.stop_tol:
            break

    logger.debug(
        "Block %d: %d greedy steps, kept %d, max-abs %.6g -> %.6g",
        block_index, steps_taken, chain_length, history[0], best_max,
    )
    return GreedyResult(RotationBlock(best_matrix), steps_taken, chain_length, tuple(history))


def build_greedy_rotation(x_block: Tensor2D, cfg: RotationBuildConfig, block_index: int = 0) -> RotationBlock:
    return greedy_rotation(x_block, cfg, block_index).block


def build_block_rotation(x: Tensor2D, cfg: RotationBuildConfig, stage: int = 0) -> BlockRotation:
    """Greedy rotation for every block of x's channels."""
    channels = x.shape[1]
    size = int(cfg.block_size)
    if channels % size != 0:
        raise ShapeError(f"block size {size} does not divide {channels} channels")
    count = channels // size
    blocks = [
        build_greedy_rotation(x[:, k * size:(k + 1) * size], cfg, block_index=stage * count + k)
        for k in range(count)
    ]
    return BlockRotation(tuple(blocks))


def build_zigzag_permutation(per_channel_max: Sequence[float], block_size: int) -> PermutationVector:
    maxima = np.asarray(per_channel_max, dtype=np.float64)
    channels = maxima.size
    if block_size < 1 or channels % block_size != 0:
        raise ShapeError(f"block size {block_size} does not divide {channels} channels")
    count = channels // block_size
    order = np.argsort(-maxima, kind="stable")
    buckets: List[List[int]] = [[] for _ in range(count)]
    for rank, channel in enumerate(order):
        lap, position = divmod(rank, count)
        block = position if lap % 2 == 0 else count - 1 - position
        buckets[block].append(int(channel))
    return PermutationVector(np.concatenate([np.asarray(b, dtype=np.intp) for b in buckets]))


def block_max_spread(per_channel_max: Sequence[float], block_size: int, p: Optional[PermutationVector] = None) -> float:
    """max - min over blocks of each block's largest channel maximum."""
    maxima = np.asarray(per_channel_max, dtype=np.float64)
    if p is not None:
        maxima = maxima[p.entries]
    per_block = maxima.reshape(-1, block_size).max(axis=1)
    return float(per_block.max() - per_block.min())


def weight_range_energy(w: Tensor2D) -> float:
    """Sum of squared per-output-channel ranges, proportional to per-channel quantization noise."""
    return float(np.square(np.ptp(w, axis=0)).sum()) if w.size else 0.0


def keep_weight_improving(rotation: BlockRotation, w: Tensor2D) -> BlockRotation:
    """Reset to identity every block whose rotation widens the weights' per-channel ranges."""
    size = rotation.block_size
    if w.shape[0] != rotation.channel_count:
        raise ShapeError(f"rotation over {rotation.channel_count} channels checked against {w.shape[0]} weight rows")
    kept: List[RotationBlock] = []
    for k, block in enumerate(rotation.blocks):
        rows = w[k * size:(k + 1) * size]
        if weight_range_energy(block.matrix.T @ rows) < weight_range_energy(rows):
            kept.append(block)
        else:
            kept.append(RotationBlock.identity(size))
    dropped = sum(1 for old, new in zip(rotation.blocks, kept) if old is not new)
    if dropped:
        logger.debug("Reset %d of %d second-rotation blocks that widened weight ranges", dropped, len(kept))
    return BlockRotation(tuple(kept))


def assemble_balancing(
    x_calib: Tensor2D,
    w: Tensor2D,
    alpha: float,
    cfg: RotationBuildConfig,
    components: BalancingComponents = BalancingComponents(),
) -> BalancingParams:
    channels = x_calib.shape[1]
    if w.shape[0] != channels:
        raise ShapeError(f"activation channels {channels} do not match weight rows {w.shape[0]}")
    size = int(cfg.block_size)
    if channels % size != 0:
        raise ShapeError(f"block size {size} does not divide {channels} channels")

    delta = compute_delta(x_calib, w, alpha) if components.smooth else SmoothingDiag.identity(channels, alpha)
    current = smooth_activations(x_calib, delta)

    r1 = build_block_rotation(current, cfg, stage=0) if components.r1 else BlockRotation.identity(channels, size)
    current = r1.rotate_columns(current)

    if components.p:
        p = build_zigzag_permutation(np.abs(current).max(axis=0), size)
    else:
        p = PermutationVector.identity(channels)
    current = apply_permutation(current, p, "cols")

    if components.r2:
        # Blocks that widen the weight ranges stay unrotated.
        w_current = apply_permutation(r1.rotate_rows_transposed(smooth_weights(w, delta)), p, "rows")
        r2 = keep_weight_improving(build_block_rotation(current, cfg, stage=1), w_current)
    else:
        r2 = BlockRotation.identity(channels, size)
    return BalancingParams(delta=delta, r1=r1, p=p, r2=r2)


def transform_activations(x: Tensor2D, bp: BalancingParams) -> Tensor2D:
    if x.shape[1] != bp.channel_count:
        raise ShapeError(f"activations have {x.shape[1]} channels, params cover {bp.channel_count}")
    out = smooth_activations(x, bp.delta)
    out = bp.r1.rotate_columns(out)
    out = apply_permutation(out, bp.p, "cols")
    return bp.r2.rotate_columns(out)


def transform_weights(w: Tensor2D, bp: BalancingParams) -> Tensor2D:
    if w.shape[0] != bp.channel_count:
        raise ShapeError(f"weights have {w.shape[0]} rows, params cover {bp.channel_count}")
    out = smooth_weights(w, bp.delta)
    out = bp.r1.rotate_rows_transposed(out)
    out = apply_permutation(out, bp.p, "rows")
    return bp.r2.rotate_rows_transposed(out)
