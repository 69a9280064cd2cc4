"""
Trace storage - binary container for calibration traces.

Layout (little-endian):
    magic "TRDQ", u32 version, u32 record count, then per record
    u32 id, u32 timestep, u8 flags, u32 rows, u32 cols, rows*cols f64 row-major.

Bit 0 of the flags byte is the CFG branch; bit 1 marks an attention record,
in which case id is the block id instead of the layer id.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np

from .constants import RecordKind
from .errors import FormatError
from .io_utils import read_bytes, write_bytes_atomic
from .types import AttentionRecord, TimestepTrace

logger = logging.getLogger("trdq.trace_storage")

MAGIC = b"TRDQ"
VERSION = 1

_HEADER = struct.Struct("<4sII")
_RECORD = struct.Struct("<IIBII")
_F64 = np.dtype("<f8")


@dataclass
class TraceSet:
    traces: List[TimestepTrace] = field(default_factory=list)
    attention: List[AttentionRecord] = field(default_factory=list)

    @property
    def record_count(self) -> int:
        return len(self.traces) + len(self.attention)


def _record(ident: int, timestep: int, flags: int, values: np.ndarray) -> bytes:
    payload = np.ascontiguousarray(values, dtype=_F64)
    rows, cols = payload.shape
    return _RECORD.pack(ident, timestep, flags, rows, cols) + payload.tobytes()


def encode_traces(trace_set: TraceSet) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, trace_set.record_count)]
    for trace in sorted(trace_set.traces, key=lambda tr: (tr.layer_id, tr.timestep, tr.branch)):
        flags = trace.branch & RecordKind.BRANCH_MASK
        parts.append(_record(trace.layer_id, trace.timestep, flags, trace.activations))
    for record in sorted(trace_set.attention, key=lambda r: (r.block_id, r.timestep, r.branch)):
        flags = (record.branch & RecordKind.BRANCH_MASK) | RecordKind.ATTENTION
        parts.append(_record(record.block_id, record.timestep, flags, record.attn))
    return b"".join(parts)


def decode_traces(data: bytes) -> TraceSet:
    if len(data) < _HEADER.size:
        raise FormatError("trace file truncated in header")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"not a trace file (magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"unsupported trace file version {version}")

    result = TraceSet()
    offset = _HEADER.size
    for index in range(count):
        if offset + _RECORD.size > len(data):
            raise FormatError(f"trace file truncated at record {index}")
        ident, timestep, flags, rows, cols = _RECORD.unpack_from(data, offset)
        offset += _RECORD.size
        if flags & ~(RecordKind.BRANCH_MASK | RecordKind.ATTENTION):
            raise FormatError(f"record {index} has unknown flags {flags:#x}")
        size = rows * cols * _F64.itemsize
        if offset + size > len(data):
            raise FormatError(f"trace file truncated in record {index} payload")
        values = np.frombuffer(data, dtype=_F64, count=rows * cols, offset=offset).astype(np.float64).reshape(rows, cols)
        offset += size
        if not np.isfinite(values).all():
            raise FormatError(f"record {index} contains NaN or Inf")
        branch = flags & RecordKind.BRANCH_MASK
        if flags & RecordKind.ATTENTION:
            result.attention.append(AttentionRecord(block_id=ident, timestep=timestep, branch=branch, attn=values))
        else:
            result.traces.append(TimestepTrace(layer_id=ident, timestep=timestep, activations=values, branch=branch))
    if offset != len(data):
        raise FormatError(f"trace file has {len(data) - offset} trailing bytes")
    return result


async def load_traces(path: Path) -> TraceSet:
    data = await read_bytes(path)
    trace_set = decode_traces(data)
    logger.info("Loaded %d traces and %d attention records from %s", len(trace_set.traces), len(trace_set.attention), path)
    return trace_set


async def save_traces(path: Path, trace_set: TraceSet) -> int:
    payload = encode_traces(trace_set)
    await write_bytes_atomic(path, payload)
    logger.info("Wrote %d records (%d bytes) to %s", trace_set.record_count, len(payload), path)
    return len(payload)
