"""
Bank storage - binary container for calibrated parameter banks.

Layout (little-endian):
    magic "TRDB", u32 version, u32 block_size, u8 grouping kind,
    u32 bucket count, u32 schedule_len, u64 rotation seed, f64 alpha,
    u8 component mask, u32 max_greedy_steps, f64 stop_tol, u32 entry count,
    then per entry (sorted by layer, group)
    u32 layer, u32 group, u32 channels, channels f64 delta,
    R1 blocks (f64 row-major), channels u32 permutation, R2 blocks.
"""
from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from services.rotation import BalancingComponents, BalancingParams, BlockRotation, RotationBlock, RotationBuildConfig
from services.smoothing import SmoothingDiag
from services.time_bank import Grouping, TimeParamBank

from .errors import FormatError, TrdqError
from .io_utils import read_bytes, write_bytes_atomic
from .tensor import PermutationVector
from .utils import is_power_of_two

logger = logging.getLogger("trdq.bank_storage")

MAGIC = b"TRDB"
VERSION = 1

# Stored rotations must be orthogonal to this tolerance.
ORTHOGONALITY_TOL = 1e-8

_HEADER = struct.Struct("<4sIIBIIQdBIdI")
_ENTRY = struct.Struct("<III")
_F64 = np.dtype("<f8")
_U32 = np.dtype("<u4")


def encode_bank(bank: TimeParamBank) -> bytes:
    rotation = bank.rotation
    parts: List[bytes] = [
        _HEADER.pack(
            MAGIC,
            VERSION,
            int(rotation.block_size),
            int(bank.grouping.kind),
            int(bank.grouping.count),
            int(bank.schedule_len),
            int(rotation.rng_seed),
            float(bank.alpha),
            bank.components.mask,
            int(rotation.max_greedy_steps),
            float(rotation.stop_tol),
            len(bank.entries),
        )
    ]
    for (layer, group), params in sorted(bank.entries.items()):
        parts.append(_ENTRY.pack(layer, group, params.channel_count))
        parts.append(np.ascontiguousarray(params.delta.delta, dtype=_F64).tobytes())
        parts.append(np.ascontiguousarray(params.r1.stack, dtype=_F64).tobytes())
        parts.append(np.ascontiguousarray(params.p.entries, dtype=_U32).tobytes())
        parts.append(np.ascontiguousarray(params.r2.stack, dtype=_F64).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> int:
        if self.offset + size > len(self.data):
            raise FormatError(f"bank file truncated in {what}")
        start = self.offset
        self.offset += size
        return start

    def array(self, dtype: np.dtype, count: int, what: str) -> np.ndarray:
        start = self.take(count * dtype.itemsize, what)
        return np.frombuffer(self.data, dtype=dtype, count=count, offset=start)


def _blocks(values: np.ndarray, count: int, size: int, what: str) -> BlockRotation:
    stack = values.astype(np.float64).reshape(count, size, size)
    blocks = tuple(RotationBlock(matrix) for matrix in stack)
    worst = max(block.orthogonality_error() for block in blocks)
    if not worst < ORTHOGONALITY_TOL:
        raise FormatError(f"{what} is not orthogonal (error {worst:.3g})")
    return BlockRotation(blocks)


def decode_bank(data: bytes) -> TimeParamBank:
    reader = _Reader(data)
    start = reader.take(_HEADER.size, "header")
    (magic, version, block_size, kind, bucket_count, schedule_len, seed, alpha,
     mask, max_steps, stop_tol, count) = _HEADER.unpack_from(data, start)
    if magic != MAGIC:
        raise FormatError(f"not a bank file (magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"unsupported bank file version {version}")
    if not is_power_of_two(block_size):
        raise FormatError(f"bank block size {block_size} is not a power of two")
    if mask & ~0x0F:
        raise FormatError(f"bank component mask {mask:#x} has unknown bits")

    try:
        grouping = Grouping(kind, bucket_count)
        rotation = RotationBuildConfig(block_size=block_size, max_greedy_steps=max_steps, rng_seed=seed, stop_tol=stop_tol)
    except TrdqError as e:
        raise FormatError(f"bank header invalid: {e}") from e

    entries: Dict[Tuple[int, int], BalancingParams] = {}
    for index in range(count):
        start = reader.take(_ENTRY.size, f"entry {index} header")
        layer, group, channels = _ENTRY.unpack_from(data, start)
        if channels == 0 or channels % block_size != 0:
            raise FormatError(f"entry {index}: {channels} channels not divisible by block size {block_size}")
        blocks = channels // block_size
        label = f"entry {index} (layer {layer}, group {group})"
        try:
            delta = SmoothingDiag(reader.array(_F64, channels, label).astype(np.float64), float(alpha))
            r1 = _blocks(reader.array(_F64, blocks * block_size * block_size, label), blocks, block_size, f"{label} R1")
            perm = PermutationVector(reader.array(_U32, channels, label).astype(np.intp))
            r2 = _blocks(reader.array(_F64, blocks * block_size * block_size, label), blocks, block_size, f"{label} R2")
        except FormatError:
            raise
        except TrdqError as e:
            raise FormatError(f"{label} invalid: {e}") from e
        if (layer, group) in entries:
            raise FormatError(f"duplicate bank entry for layer {layer}, group {group}")
        entries[(layer, group)] = BalancingParams(delta=delta, r1=r1, p=perm, r2=r2)

    if reader.offset != len(data):
        raise FormatError(f"bank file has {len(data) - reader.offset} trailing bytes")

    try:
        return TimeParamBank(
            entries=entries,
            grouping=grouping,
            schedule_len=schedule_len,
            alpha=float(alpha),
            rotation=rotation,
            components=BalancingComponents.from_mask(mask),
        )
    except TrdqError as e:
        raise FormatError(f"bank header invalid: {e}") from e


async def load_bank(path: Path) -> TimeParamBank:
    bank = decode_bank(await read_bytes(path))
    logger.info("Loaded bank with %d entries (%s) from %s", len(bank.entries), bank.grouping.format(), path)
    return bank


async def save_bank(path: Path, bank: TimeParamBank) -> int:
    payload = encode_bank(bank)
    await write_bytes_atomic(path, payload)
    logger.info("Wrote bank with %d entries (%d bytes) to %s", len(bank.entries), len(payload), path)
    return len(payload)
