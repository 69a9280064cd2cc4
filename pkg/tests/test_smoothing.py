from __future__ import annotations

import numpy as np
import pytest

from core.errors import DomainError, ShapeError
from services.smoothing import SmoothingDiag, apply_smoothing, compute_delta


def test_symmetric_case_gives_unit_delta():
    x = np.array([[4.0, -4.0, 1.0], [1.0, 2.0, -4.0]])
    w = np.array([[4.0, 0.5], [-4.0, 1.0], [2.0, 4.0]])
    d = compute_delta(x, w, 0.5)
    np.testing.assert_array_equal(d.delta, np.ones(3))


def test_alpha_one_is_activation_max(rng):
    x = rng.standard_normal((7, 5))
    w = rng.standard_normal((5, 3))
    d = compute_delta(x, w, 1.0)
    np.testing.assert_array_equal(d.delta, np.abs(x).max(axis=0))


def test_hand_evaluation():
    x = np.array([[8.0], [-1.0]])
    w = np.array([[2.0, -0.5]])
    assert compute_delta(x, w, 0.5).delta[0] == pytest.approx(2.0)


def test_identity_delta_leaves_operands(rng):
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((6, 2))
    xs, ws = apply_smoothing(x, w, SmoothingDiag.identity(6))
    np.testing.assert_array_equal(xs, x)
    np.testing.assert_array_equal(ws, w)


def test_product_invariance(rng):
    for _ in range(10):
        x = rng.standard_normal((8, 8)) * rng.uniform(0.1, 50.0, 8)
        w = rng.standard_normal((8, 8))
        d = compute_delta(x, w, rng.uniform(0.0, 1.0))
        xs, ws = apply_smoothing(x, w, d)
        ref = x @ w
        assert np.abs(xs @ ws - ref).max() <= 1e-10 * np.abs(ref).max()


def test_balance_at_half(rng):
    x = rng.standard_normal((16, 8)) * np.array([1, 2, 50, 1, 0.1, 3, 7, 1])
    w = rng.standard_normal((8, 4))
    xs, ws = apply_smoothing(x, w, compute_delta(x, w, 0.5))
    np.testing.assert_allclose(np.abs(xs).max(axis=0), np.abs(ws).max(axis=1), rtol=1e-9)


def test_dead_channels_stay_finite(rng):
    x = rng.standard_normal((4, 3))
    x[:, 1] = 0.0
    w = rng.standard_normal((3, 2))
    w[2, :] = 0.0
    d = compute_delta(x, w, 0.5)
    assert np.isfinite(d.delta).all()
    assert (d.delta > 0).all()


def test_errors(rng):
    with pytest.raises(ShapeError):
        compute_delta(np.ones((2, 3)), np.ones((4, 2)), 0.5)
    with pytest.raises(DomainError):
        compute_delta(np.ones((2, 3)), np.ones((3, 2)), 1.5)
    with pytest.raises(DomainError):
        SmoothingDiag(np.array([1.0, 0.0]))
    with pytest.raises(ShapeError):
        apply_smoothing(np.ones((2, 3)), np.ones((3, 2)), SmoothingDiag.identity(4))
