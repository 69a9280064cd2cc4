from __future__ import annotations

import asyncio
import struct

import numpy as np
import pytest

from core.bank_storage import decode_bank, encode_bank, load_bank, save_bank
from core.errors import FormatError
from core.trace_storage import TraceSet, decode_traces, encode_traces, load_traces, save_traces
from core.types import AttentionRecord, TimestepTrace
from services.rotation import BalancingComponents, RotationBuildConfig
from services.time_bank import Grouping, calibrate_bank


@pytest.fixture
def trace_set(rng) -> TraceSet:
    traces = [
        TimestepTrace(layer_id=layer, timestep=t, activations=rng.standard_normal((3, 16)), branch=branch)
        for layer in (1, 0)
        for t in (2, 1)
        for branch in (1, 0)
    ]
    attention = [
        AttentionRecord(block_id=0, timestep=t, branch=branch, attn=rng.uniform(size=(4, 2)))
        for t in (1, 2)
        for branch in (0, 1)
    ]
    return TraceSet(traces, attention)


@pytest.fixture
def bank(rng):
    traces = []
    for t in range(1, 5):
        x = rng.standard_normal((8, 32))
        x[:, t] *= 25.0
        traces.append(TimestepTrace(layer_id=0, timestep=t, activations=x))
        traces.append(TimestepTrace(layer_id=1, timestep=t, activations=rng.standard_normal((8, 32))))
    weights = {0: rng.standard_normal((32, 4)), 1: rng.standard_normal((32, 6))}
    cfg = RotationBuildConfig(block_size=16, max_greedy_steps=5, rng_seed=42, stop_tol=1e-4)
    return calibrate_bank(traces, weights, 0.4, cfg, Grouping.buckets(2), 4, BalancingComponents(p=False))


def test_trace_round_trip(trace_set):
    data = encode_traces(trace_set)
    assert data[:4] == b"TRDQ"
    decoded = decode_traces(data)
    assert decoded.record_count == trace_set.record_count
    assert [(t.layer_id, t.timestep, t.branch) for t in decoded.traces] == sorted(
        (t.layer_id, t.timestep, t.branch) for t in trace_set.traces
    )
    originals = {(t.layer_id, t.timestep, t.branch): t.activations for t in trace_set.traces}
    for trace in decoded.traces:
        np.testing.assert_array_equal(trace.activations, originals[(trace.layer_id, trace.timestep, trace.branch)])
    assert [(r.block_id, r.timestep, r.branch) for r in decoded.attention] == [(0, 1, 0), (0, 1, 1), (0, 2, 0), (0, 2, 1)]
    assert encode_traces(decoded) == data


def test_trace_header_layout(trace_set):
    data = encode_traces(trace_set)
    magic, version, count = struct.unpack_from("<4sII", data, 0)
    assert (magic, version, count) == (b"TRDQ", 1, 12)
    layer, timestep, flags, rows, cols = struct.unpack_from("<IIBII", data, 12)
    assert (layer, timestep, flags, rows, cols) == (0, 1, 0, 3, 16)


@pytest.mark.parametrize(
    "corrupt",
    [
        lambda d: b"XXXX" + d[4:],
        lambda d: d[:4] + struct.pack("<I", 9) + d[8:],
        lambda d: d[:-5],
        lambda d: d[:10],
        lambda d: d + b"\x00",
        lambda d: d[:20] + b"\x80" + d[21:],
    ],
    ids=["magic", "version", "truncated-payload", "truncated-header", "trailing", "flags"],
)
def test_trace_corruption_rejected(trace_set, corrupt):
    with pytest.raises(FormatError):
        decode_traces(corrupt(encode_traces(trace_set)))


def test_trace_nan_rejected():
    bad = TraceSet([TimestepTrace(layer_id=0, timestep=1, activations=np.array([[1.0, np.nan]]))])
    with pytest.raises(FormatError):
        decode_traces(encode_traces(bad))


def test_bank_round_trip_is_bit_exact(bank):
    data = encode_bank(bank)
    decoded = decode_bank(data)
    assert encode_bank(decoded) == data
    assert decoded.grouping == bank.grouping
    assert decoded.schedule_len == 4
    assert decoded.alpha == 0.4
    assert decoded.rotation == bank.rotation
    assert decoded.components == bank.components
    assert list(decoded.entries) == list(bank.entries)
    for key, params in bank.entries.items():
        other = decoded.entries[key]
        np.testing.assert_array_equal(other.delta.delta, params.delta.delta)
        np.testing.assert_array_equal(other.r1.stack, params.r1.stack)
        np.testing.assert_array_equal(other.p.entries, params.p.entries)
        np.testing.assert_array_equal(other.r2.stack, params.r2.stack)


def test_bank_corruption_rejected(bank):
    data = encode_bank(bank)
    header = struct.calcsize("<4sIIBIIQdBIdI")
    entry = struct.calcsize("<III")
    with pytest.raises(FormatError):
        decode_bank(b"TRDQ" + data[4:])
    with pytest.raises(FormatError):
        decode_bank(data[:-3])
    with pytest.raises(FormatError):
        decode_bank(data + b"\x00" * 8)
    # First R1 element sits after the entry header and the 32-entry delta.
    offset = header + entry + 32 * 8
    broken = data[:offset] + struct.pack("<d", 5.0) + data[offset + 8:]
    with pytest.raises(FormatError):
        decode_bank(broken)
    # A zero delta is not a valid smoothing factor.
    offset = header + entry
    broken = data[:offset] + struct.pack("<d", 0.0) + data[offset + 8:]
    with pytest.raises(FormatError):
        decode_bank(broken)


def test_async_save_and_load(tmp_path, trace_set, bank):
    trace_path = tmp_path / "nested" / "trace.trdq"
    bank_path = tmp_path / "bank.trdq"

    async def run():
        size = await save_traces(trace_path, trace_set)
        await save_bank(bank_path, bank)
        return size, await load_traces(trace_path), await load_bank(bank_path)

    size, traces, loaded = asyncio.run(run())
    assert size == trace_path.stat().st_size
    assert traces.record_count == trace_set.record_count
    assert encode_bank(loaded) == encode_bank(bank)
    assert sorted(p.name for p in tmp_path.rglob("*")) == ["bank.trdq", "nested", "trace.trdq"]
