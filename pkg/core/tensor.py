"""
Dense 2-D tensor substrate.

Activations are token x channel, weights are in-channel x out-channel, all
float64 row-major numpy arrays. Every function here is pure and never mutates
its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence, Union

import numpy as np
import numpy.typing as npt

from .errors import DomainError, ShapeError

Tensor2D = npt.NDArray[np.float64]

Axis = Literal["rows", "cols"]
Scope = Literal["global", "per_row", "per_col"]


def as_tensor(values: Union[Tensor2D, Sequence[Sequence[float]]], name: str = "tensor") -> Tensor2D:
    """Coerce to a C-contiguous float64 matrix and reject NaN/Inf."""
    array = np.ascontiguousarray(values, dtype=np.float64)
    if array.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {array.shape}")
    if not np.isfinite(array).all():
        raise DomainError(f"{name} contains NaN or Inf")
    return array


def matmul(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))


def transpose(a: Tensor2D) -> Tensor2D:
    return np.ascontiguousarray(a.T)


@dataclass(frozen=True, eq=False)
class PermutationVector:
    """
    Channel permutation stored as an index vector.

    Applied to columns, output column i is input column entries[i]; the dense
    matrix therefore has M[entries[i], i] = 1 so that x @ M == x[:, entries].
    """
    entries: npt.NDArray[np.intp]

    def __post_init__(self) -> None:
        entries = np.asarray(self.entries, dtype=np.intp)
        if entries.ndim != 1:
            raise ShapeError("permutation must be a vector")
        if not np.array_equal(np.sort(entries), np.arange(entries.size)):
            raise DomainError("entries are not a permutation of 0..C-1")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @classmethod
    def identity(cls, size: int) -> PermutationVector:
        return cls(np.arange(size, dtype=np.intp))

    def __len__(self) -> int:
        return int(self.entries.size)

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.entries, np.arange(self.entries.size)))

    def inverse(self) -> PermutationVector:
        inv = np.empty_like(self.entries)
        inv[self.entries] = np.arange(self.entries.size, dtype=np.intp)
        return PermutationVector(inv)

    def densify(self) -> Tensor2D:
        size = self.entries.size
        dense = np.zeros((size, size), dtype=np.float64)
        dense[self.entries, np.arange(size)] = 1.0
        return dense


def apply_permutation(x: Tensor2D, p: PermutationVector, axis: Axis = "cols") -> Tensor2D:
    """
    Gather along one axis.

    cols: x @ densify(p).  rows: densify(p).T @ x, i.e. row i becomes x[p[i]].
    """
    if axis == "cols":
        if x.shape[1] != len(p):
            raise ShapeError(f"permutation of length {len(p)} does not match {x.shape[1]} columns")
        return np.ascontiguousarray(x[:, p.entries])
    if axis == "rows":
        if x.shape[0] != len(p):
            raise ShapeError(f"permutation of length {len(p)} does not match {x.shape[0]} rows")
        return np.ascontiguousarray(x[p.entries, :])
    raise ValueError(f"unknown axis {axis!r}")


def max_abs(x: Tensor2D, scope: Scope = "global") -> Union[float, npt.NDArray[np.float64]]:
    if x.size == 0:
        raise DomainError("max_abs of an empty tensor")
    magnitudes = np.abs(x)
    if scope == "global":
        return float(magnitudes.max())
    if scope == "per_row":
        return magnitudes.max(axis=1)
    if scope == "per_col":
        return magnitudes.max(axis=0)
    raise ValueError(f"unknown scope {scope!r}")


def frobenius(x: Tensor2D) -> float:
    return float(np.linalg.norm(x))
