"""
Smoothing migration.

Per-channel diagonal rescaling that moves dynamic range from activations
into weights: x_hat = x / delta, w_hat = delta * w (row-wise).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import numpy.typing as npt

from core.errors import DomainError, ShapeError
from core.tensor import Tensor2D

# Dead channels would otherwise divide by zero.
MAGNITUDE_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class SmoothingDiag:
    delta: npt.NDArray[np.float64]
    alpha: float = 0.5

    def __post_init__(self) -> None:
        delta = np.asarray(self.delta, dtype=np.float64)
        if delta.ndim != 1:
            raise ShapeError("smoothing delta must be a vector")
        if not (np.isfinite(delta).all() and (delta > 0.0).all()):
            raise DomainError("smoothing delta must be finite and strictly positive")
        delta.setflags(write=False)
        object.__setattr__(self, "delta", delta)

    @classmethod
    def identity(cls, size: int, alpha: float = 0.5) -> SmoothingDiag:
        return cls(np.ones(size, dtype=np.float64), alpha)

    def __len__(self) -> int:
        return int(self.delta.size)

    @property
    def is_identity(self) -> bool:
        return bool((self.delta == 1.0).all())


def compute_delta(x: Tensor2D, w: Tensor2D, alpha: float) -> SmoothingDiag:
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"activation channels {x.shape[1]} do not match weight rows {w.shape[0]}")
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must be in [0, 1], got {alpha}")
    x_max = np.maximum(np.abs(x).max(axis=0), MAGNITUDE_FLOOR)
    # Input channel j of a C_in x C_out weight is row j.
    w_max = np.maximum(np.abs(w).max(axis=1), MAGNITUDE_FLOOR)
    delta = np.power(x_max, alpha) / np.power(w_max, 1.0 - alpha)
    return SmoothingDiag(delta, float(alpha))


def smooth_activations(x: Tensor2D, d: SmoothingDiag) -> Tensor2D:
    if x.shape[1] != len(d):
        raise ShapeError(f"activation channels {x.shape[1]} do not match delta length {len(d)}")
    return x / d.delta[None, :]


def smooth_weights(w: Tensor2D, d: SmoothingDiag) -> Tensor2D:
    if w.shape[0] != len(d):
        raise ShapeError(f"weight rows {w.shape[0]} do not match delta length {len(d)}")
    return d.delta[:, None] * w


def apply_smoothing(x: Tensor2D, w: Tensor2D, d: SmoothingDiag) -> Tuple[Tensor2D, Tensor2D]:
    return smooth_activations(x, d), smooth_weights(w, d)
