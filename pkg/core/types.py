"""
Type definitions and dataclasses shared across the pipeline.

Records that end up in reports carry to_dict; records that carry tensors
travel through the binary codecs instead.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional

import numpy as np
import numpy.typing as npt

from .constants import Branch
from .utils import finite_or_none


@dataclass(frozen=True)
class QuantMetrics:
    """Error between a reference tensor and its quantized approximation."""
    mse: float
    max_abs_err: float
    sqnr_db: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "mse": self.mse,
            "max_abs_err": self.max_abs_err,
            "sqnr_db": finite_or_none(self.sqnr_db),
        }


@dataclass(frozen=True)
class OutputMetrics:
    """End-to-end comparison of two latents."""
    mse: float
    max_abs_err: float
    sqnr_db: float
    cosine: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "mse": self.mse,
            "max_abs_err": self.max_abs_err,
            "sqnr_db": finite_or_none(self.sqnr_db),
            "cosine": self.cosine,
        }


@dataclass(frozen=True, eq=False)
class TimestepTrace:
    """Input activations of one linear layer at one denoising step."""
    layer_id: int
    timestep: int
    activations: npt.NDArray[np.float64]
    branch: int = Branch.CONDITIONAL

    @property
    def key(self) -> tuple[int, int]:
        return (self.layer_id, self.timestep)


@dataclass(frozen=True, eq=False)
class AttentionRecord:
    """Post-softmax attention probabilities of one block, heads stacked along rows."""
    block_id: int
    timestep: int
    branch: int
    attn: npt.NDArray[np.float64]

    @property
    def key(self) -> tuple[int, int]:
        return (self.block_id, self.timestep)


@dataclass
class LayerError:
    """Local quantization error of one linear layer at one step."""
    layer_id: int
    layer_name: str
    timestep: int
    mse: float
    sqnr_db: float
    seed: Optional[int] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "layer_id": self.layer_id,
            "layer": self.layer_name,
            "timestep": self.timestep,
            "mse": self.mse,
            "sqnr_db": finite_or_none(self.sqnr_db),
        }
