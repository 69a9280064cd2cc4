from __future__ import annotations

import numpy as np
import pytest

from core.config import ConfigError
from core.errors import CoverageError, DomainError
from core.types import TimestepTrace
from services.rotation import BalancingComponents, assemble_balancing, transform_activations
from services.smoothing import smooth_activations
from services.time_bank import Grouping, calibrate_bank, dynamic_activation_quant, lookup
from services.quantizer import dequantize


def same_params(a, b) -> bool:
    return (
        np.array_equal(a.delta.delta, b.delta.delta)
        and np.array_equal(a.r1.stack, b.r1.stack)
        and np.array_equal(a.p.entries, b.p.entries)
        and np.array_equal(a.r2.stack, b.r2.stack)
    )


def traces_for(rng, layer_ids, steps, channels=32, tokens=6, drift=True):
    out = []
    for layer in layer_ids:
        for t in range(1, steps + 1):
            x = rng.standard_normal((tokens, channels))
            if drift:
                x[:, t % channels] *= 40.0
            out.append(TimestepTrace(layer_id=layer, timestep=t, activations=x))
    return out


def test_grouping_parse_and_format():
    assert Grouping.parse("per-step").format() == "per-step"
    assert Grouping.parse("per_step").format() == "per-step"
    assert Grouping.parse("buckets:4") == Grouping.buckets(4)
    assert Grouping.buckets(1).is_time_agnostic
    with pytest.raises(ConfigError):
        Grouping.parse("buckets:x")
    with pytest.raises(ConfigError):
        Grouping.buckets(0)


def test_bucket_mapping_enumeration():
    g = Grouping.buckets(4)
    mapping = [g.group_of(t, 20) for t in range(1, 21)]
    assert mapping == [1] * 5 + [2] * 5 + [3] * 5 + [4] * 5
    assert g.groups(20) == [1, 2, 3, 4]
    assert Grouping.parse("per-step").groups(3) == [1, 2, 3]
    with pytest.raises(DomainError):
        g.group_of(0, 20)
    with pytest.raises(DomainError):
        g.group_of(21, 20)


def test_single_entry_equals_assembly(rng, rotation_cfg):
    trace = TimestepTrace(layer_id=0, timestep=1, activations=rng.standard_normal((8, 32)))
    w = rng.standard_normal((32, 4))
    bank = calibrate_bank([trace], {0: w}, 0.5, rotation_cfg, Grouping.parse("per-step"), 1)
    assert list(bank.entries) == [(0, 1)]
    assert same_params(bank.lookup(0, 1), assemble_balancing(trace.activations, w, 0.5, rotation_cfg))


def test_identical_traces_give_identical_entries(rng, rotation_cfg):
    x = rng.standard_normal((8, 32))
    x[:, 3] *= 30.0
    traces = [TimestepTrace(layer_id=0, timestep=t, activations=x) for t in range(1, 6)]
    bank = calibrate_bank(traces, {0: rng.standard_normal((32, 4))}, 0.5, rotation_cfg, Grouping.parse("per-step"), 5)
    first = bank.lookup(0, 1)
    assert all(same_params(first, bank.lookup(0, t)) for t in range(2, 6))


def test_buckets_entry_count_and_lookup(rng, rotation_cfg):
    weights = {0: rng.standard_normal((32, 4)), 1: rng.standard_normal((32, 8))}
    bank = calibrate_bank(traces_for(rng, [0, 1], 20), weights, 0.5, rotation_cfg, Grouping.buckets(4), 20)
    assert bank.entries_for(0) == 4
    assert bank.entries_for(1) == 4
    assert bank.lookup(0, 1) is bank.lookup(0, 5)
    assert bank.lookup(0, 1) is not bank.lookup(0, 20)
    assert not same_params(bank.lookup(0, 1), bank.lookup(0, 20))
    assert bank.missing([0, 1]) == []
    assert bank.missing([2]) == [(2, 1), (2, 2), (2, 3), (2, 4)]
    assert bank.parameter_bytes() > 0


def test_per_step_lookup_returns_that_step(rng, rotation_cfg):
    traces = traces_for(rng, [0], 3)
    w = rng.standard_normal((32, 4))
    bank = calibrate_bank(traces, {0: w}, 0.5, rotation_cfg, Grouping.parse("per-step"), 3)
    for trace in traces:
        expected = assemble_balancing(trace.activations, w, 0.5, rotation_cfg)
        assert same_params(lookup(bank, 0, trace.timestep), expected)
    with pytest.raises(DomainError):
        lookup(bank, 0, 4)


def test_single_bucket_is_time_agnostic(rng, rotation_cfg):
    bank = calibrate_bank(traces_for(rng, [0], 6), {0: rng.standard_normal((32, 4))}, 0.5, rotation_cfg, Grouping.buckets(1), 6)
    assert len(bank.entries) == 1
    assert all(bank.lookup(0, t) is bank.lookup(0, 1) for t in range(1, 7))


def test_coverage_gap_lists_missing_keys(rng, rotation_cfg):
    traces = [tr for tr in traces_for(rng, [0], 4) if tr.timestep != 3]
    with pytest.raises(CoverageError) as excinfo:
        calibrate_bank(traces, {0: rng.standard_normal((32, 4))}, 0.5, rotation_cfg, Grouping.parse("per-step"), 4)
    assert excinfo.value.missing == [(0, 3)]
    assert "(0, 3)" in str(excinfo.value)


def test_branch_traces_are_pooled(rng, rotation_cfg):
    cond = rng.standard_normal((4, 32))
    uncond = rng.standard_normal((4, 32))
    w = rng.standard_normal((32, 4))
    traces = [
        TimestepTrace(layer_id=0, timestep=1, activations=uncond, branch=1),
        TimestepTrace(layer_id=0, timestep=1, activations=cond, branch=0),
    ]
    bank = calibrate_bank(traces, {0: w}, 0.5, rotation_cfg, Grouping.parse("per-step"), 1)
    pooled = np.concatenate([cond, uncond], axis=0)
    assert same_params(bank.lookup(0, 1), assemble_balancing(pooled, w, 0.5, rotation_cfg))


def test_smooth_only_bank_degenerates_to_smoothing(rng, rotation_cfg):
    smooth_only = BalancingComponents(smooth=True, r1=False, p=False, r2=False)
    bank = calibrate_bank(
        traces_for(rng, [0], 4), {0: rng.standard_normal((32, 4))}, 0.5, rotation_cfg,
        Grouping.buckets(1), 4, smooth_only,
    )
    params = bank.lookup(0, 2)
    x = rng.standard_normal((5, 32))
    np.testing.assert_array_equal(transform_activations(x, params), smooth_activations(x, params.delta))


def test_dynamic_quant_is_stateless_and_per_token(rng):
    x = rng.standard_normal((6, 32))
    a = dynamic_activation_quant(x, 8)
    b = dynamic_activation_quant(x, 8)
    np.testing.assert_array_equal(a.ints, b.ints)
    np.testing.assert_array_equal(a.scales, b.scales)
    assert a.scales.size == 6
    np.testing.assert_array_equal(a.ints[np.arange(6), x.argmax(axis=1)], 255)
    np.testing.assert_array_equal(a.ints[np.arange(6), x.argmin(axis=1)], 0)


def test_dynamic_quant_shift(rng):
    x = rng.standard_normal((4, 32))
    shifted = dequantize(dynamic_activation_quant(x + 3.0, 8))
    base = dequantize(dynamic_activation_quant(x, 8))
    q = dynamic_activation_quant(x, 8)
    s = q.scales[:, None]
    assert (np.abs(shifted - (x + 3.0)) <= s / 2 + 1e-12).all()
    assert (np.abs(shifted - (base + 3.0)) <= s + 1e-12).all()
