from __future__ import annotations

import math

import numpy as np
import pytest

from core.constants import Branch, SharePolicy
from core.errors import CoverageError, DomainError, ShapeError
from core.types import AttentionRecord
from services.attention_share import (
    SharingPlan,
    SimilarityMatrix,
    apply_sharing,
    build_similarity_matrix,
    cosine_similarity,
    derive_sharing_plan,
)


def oracle_cosine(a: np.ndarray, b: np.ndarray) -> float:
    fa, fb = a.ravel().tolist(), b.ravel().tolist()
    dot = sum(x * y for x, y in zip(fa, fb))
    return dot / (math.sqrt(sum(x * x for x in fa)) * math.sqrt(sum(y * y for y in fb)))


def pair(block: int, t: int, cond: np.ndarray, uncond: np.ndarray):
    return [
        AttentionRecord(block_id=block, timestep=t, branch=Branch.CONDITIONAL, attn=cond),
        AttentionRecord(block_id=block, timestep=t, branch=Branch.UNCONDITIONAL, attn=uncond),
    ]


def matrix(values):
    return SimilarityMatrix({(b, t): v for (b, t), v in values.items()})


def test_cosine_examples(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    assert cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-12)
    assert cosine_similarity(a, -a) == pytest.approx(-1.0, abs=1e-12)
    assert cosine_similarity(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])) == 0.0
    assert cosine_similarity(a, b) == cosine_similarity(b, a)
    assert cosine_similarity(7.5 * a, b) == pytest.approx(cosine_similarity(a, b), abs=1e-12)
    assert cosine_similarity(a, b) == pytest.approx(oracle_cosine(a, b), abs=1e-12)


def test_cosine_errors():
    with pytest.raises(DomainError):
        cosine_similarity(np.zeros((2, 2)), np.ones((2, 2)))
    with pytest.raises(ShapeError):
        cosine_similarity(np.ones((2, 2)), np.ones((1, 4)))


def test_similarity_identical_and_negated(rng):
    records = []
    for block in range(3):
        a = rng.uniform(size=(4, 4))
        records += pair(block, 1, a, -a if block == 1 else a.copy())
    sim = build_similarity_matrix(records)
    assert sim.get(0, 1) == pytest.approx(1.0, abs=1e-12)
    assert sim.get(1, 1) == pytest.approx(-1.0, abs=1e-12)
    assert sim.get(2, 1) == pytest.approx(1.0, abs=1e-12)


def test_similarity_matches_oracle(rng):
    records, expected = [], {}
    for block in range(4):
        for t in range(1, 4):
            a, b = rng.uniform(size=(6, 3)), rng.uniform(size=(6, 3))
            records += pair(block, t, a, b)
            expected[(block, t)] = oracle_cosine(a, b)
    sim = build_similarity_matrix(records)
    assert len(sim.values) == 12
    assert sim.blocks == [0, 1, 2, 3]
    assert sim.timesteps == [1, 2, 3]
    for key, value in expected.items():
        assert sim.values[key] == pytest.approx(value, abs=1e-12)
    assert sim.grid().shape == (4, 3)


def test_unpaired_records_raise(rng):
    a = rng.uniform(size=(2, 2))
    records = pair(0, 1, a, a) + [AttentionRecord(block_id=1, timestep=1, branch=Branch.CONDITIONAL, attn=a)]
    with pytest.raises(CoverageError) as excinfo:
        build_similarity_matrix(records)
    assert excinfo.value.missing == [(1, 1)]


def test_grid_marks_missing_pairs_nan():
    grid = matrix({(0, 1): 0.5, (1, 2): 0.25}).grid()
    assert grid[0, 0] == 0.5
    assert math.isnan(grid[0, 1])
    assert grid[1, 1] == 0.25


def test_plan_all_shared_and_dip():
    full = matrix({(b, t): 1.0 for b in range(3) for t in range(1, 5)})
    assert derive_sharing_plan(full, 0.99).shared_blocks == frozenset({0, 1, 2})

    values = {(b, t): 0.99 for b in range(3) for t in range(1, 5)}
    values[(1, 3)] = 0.5
    plan = derive_sharing_plan(matrix(values), 0.9)
    assert plan.shared_blocks == frozenset({0, 2})
    assert not plan.is_shared(1, 1)


def test_plan_matches_brute_force_and_is_monotone(rng):
    values = {(b, t): float(rng.uniform(0.7, 1.0)) for b in range(6) for t in range(1, 6)}
    sim = matrix(values)
    previous = None
    for tau in (0.7, 0.75, 0.8, 0.9, 0.95, 1.0, 1.01):
        plan = derive_sharing_plan(sim, tau)
        oracle = {b for b in range(6) if all(values[(b, t)] >= tau for t in range(1, 6))}
        assert plan.shared_blocks == frozenset(oracle)
        if previous is not None:
            assert plan.shared_blocks <= previous
        previous = plan.shared_blocks
    assert derive_sharing_plan(sim, 1.01).shared_blocks == frozenset()


def test_per_timestep_policy():
    values = {(0, 1): 0.99, (0, 2): 0.5, (1, 1): 0.99, (1, 2): 0.99}
    plan = derive_sharing_plan(matrix(values), 0.9, SharePolicy.PER_TIMESTEP)
    assert plan.is_shared(0, 1)
    assert not plan.is_shared(0, 2)
    assert plan.is_shared(1, 2)
    assert plan.skipped_per_run(2) == 3
    assert plan.shared_blocks == frozenset({1})


def test_plan_validation():
    sim = matrix({(0, 1): 1.0})
    with pytest.raises(DomainError):
        derive_sharing_plan(sim, 0.0)
    with pytest.raises(DomainError):
        derive_sharing_plan(sim, 0.9, "sometimes")


def test_apply_sharing_defers_unconditional(rng):
    cond = rng.uniform(size=(2, 2))
    other = rng.uniform(size=(2, 2))
    calls = []

    def compute():
        calls.append(1)
        return other

    plan = SharingPlan(shared_blocks=frozenset({0}))
    out, computed = apply_sharing(plan, 0, 3, cond, compute)
    assert out is cond and computed is False and calls == []
    out, computed = apply_sharing(plan, 1, 3, cond, compute)
    assert out is other and computed is True and calls == [1]


def test_skip_accounting():
    plan = SharingPlan(shared_blocks=frozenset({0, 2}))
    assert plan.skipped_per_run(20) == 40
    assert SharingPlan.disabled().skipped_per_run(20) == 0
    everything = SharingPlan.everything(3, 5)
    assert everything.skipped_per_run(5) == 15
    assert everything.to_dict()["shared_blocks"] == [0, 1, 2]
    assert SharingPlan.disabled().to_dict()["threshold"] is None
