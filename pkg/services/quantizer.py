"""
Uniform affine quantization.

b-bit asymmetric quantization with per-token, per-channel or per-group scale
and zero point, plus the fake-quantization and error metrics every
evaluation path is built on.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import numpy.typing as npt

from core.config import ConfigError
from core.constants import Granularity
from core.errors import ShapeError
from core.tensor import Tensor2D, as_tensor
from core.types import QuantMetrics
from core.utils import round_half_away

MIN_BITS = 2
# Widths above 8 only simulate the high-precision limit; must stay under
# float64's 53-bit integer range.
MAX_BITS = 48


@dataclass(frozen=True)
class QuantConfig:
    bits: int
    granularity: str = Granularity.PER_TOKEN
    group_size: Optional[int] = None
    dynamic: bool = True

    def __post_init__(self) -> None:
        if not MIN_BITS <= int(self.bits) <= MAX_BITS:
            raise ConfigError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {self.bits}")
        if self.granularity not in (Granularity.PER_TOKEN, Granularity.PER_CHANNEL, Granularity.PER_GROUP):
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        if self.granularity == Granularity.PER_GROUP:
            if self.group_size is None or int(self.group_size) < 1:
                raise ConfigError("per_group granularity needs a positive group_size")

    @property
    def qmax(self) -> int:
        return (1 << int(self.bits)) - 1

    def group_count(self, shape: Tuple[int, int]) -> int:
        rows, cols = shape
        if self.granularity == Granularity.PER_TOKEN:
            return rows
        if self.granularity == Granularity.PER_CHANNEL:
            return cols
        return rows * (cols // int(self.group_size))


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    ints: npt.NDArray[np.int64]
    scales: npt.NDArray[np.float64]
    zero_points: npt.NDArray[np.int64]
    config: QuantConfig

    @property
    def shape(self) -> Tuple[int, int]:
        return (int(self.ints.shape[0]), int(self.ints.shape[1]))


def parse_granularity(text: str) -> Tuple[str, Optional[int]]:
    """Parse 'per_token', 'per_channel' or 'per_group:<size>'."""
    value = text.strip().lower().replace("-", "_")
    if value in (Granularity.PER_TOKEN, Granularity.PER_CHANNEL):
        return value, None
    if value.startswith(Granularity.PER_GROUP + ":"):
        size = value.split(":", 1)[1]
        if size.isdigit() and int(size) > 0:
            return Granularity.PER_GROUP, int(size)
    raise ConfigError(f"invalid granularity {text!r}")


def _grouped(x: Tensor2D, cfg: QuantConfig) -> Tuple[Tensor2D, Callable[[Tensor2D], Tensor2D]]:
    """View x as (groups, members) and return the inverse reshaping."""
    rows, cols = x.shape
    if cfg.granularity == Granularity.PER_TOKEN:
        return x, lambda g: g
    if cfg.granularity == Granularity.PER_CHANNEL:
        return x.T, lambda g: np.ascontiguousarray(g.T)
    size = int(cfg.group_size)
    if cols % size != 0:
        raise ShapeError(f"group size {size} does not divide {cols} channels")
    return x.reshape(rows * (cols // size), size), lambda g: g.reshape(rows, cols)


def quantize(x: Tensor2D, cfg: QuantConfig) -> QuantizedTensor:
    x = as_tensor(x, "quantize input")
    groups, restore = _grouped(x, cfg)
    qmax = cfg.qmax

    low = groups.min(axis=1)
    high = groups.max(axis=1)
    scales = (high - low) / qmax
    # Constant groups: s = |c| puts c exactly on the grid (ints 0 or 1), or s = 1 for c = 0.
    degenerate = ~(scales > 0.0)
    scales = np.where(degenerate, np.where(low != 0.0, np.abs(low), 1.0), scales)
    zero_points = round_half_away(-low / scales)

    ints = round_half_away(groups / scales[:, None]) + zero_points[:, None]
    ints = np.clip(ints, 0, qmax)
    return QuantizedTensor(
        ints=restore(ints).astype(np.int64),
        scales=scales.astype(np.float64),
        zero_points=zero_points.astype(np.int64),
        config=cfg,
    )


def dequantize(q: QuantizedTensor) -> Tensor2D:
    ints = q.ints.astype(np.float64)
    groups, restore = _grouped(ints, q.config)
    values = (groups - q.zero_points[:, None].astype(np.float64)) * q.scales[:, None]
    return restore(values)


def fake_quantize(x: Tensor2D, cfg: QuantConfig) -> Tensor2D:
    return dequantize(quantize(x, cfg))


def error_metrics(reference: Tensor2D, approx: Tensor2D) -> QuantMetrics:
    if reference.shape != approx.shape:
        raise ShapeError(f"metric inputs differ in shape: {reference.shape} vs {approx.shape}")
    err = approx - reference
    noise = float(np.sum(err * err))
    signal = float(np.sum(reference * reference))
    if noise == 0.0:
        sqnr = float("inf")
    elif signal == 0.0:
        sqnr = float("-inf")
    else:
        sqnr = 10.0 * float(np.log10(signal / noise))
    return QuantMetrics(
        mse=noise / max(1, reference.size),
        max_abs_err=float(np.abs(err).max()) if err.size else 0.0,
        sqnr_db=sqnr,
    )


def quant_error(x: Tensor2D, cfg: QuantConfig) -> QuantMetrics:
    x = as_tensor(x, "quant_error input")
    return error_metrics(x, fake_quantize(x, cfg))


def weight_config(bits: int) -> QuantConfig:
    """Static per-output-channel config for C_in x C_out weights."""
    return QuantConfig(bits=bits, granularity=Granularity.PER_CHANNEL, dynamic=False)


def quantize_weight(w: Tensor2D, bits: int) -> QuantizedTensor:
    return quantize(w, weight_config(bits))


def fake_quantize_weight(w: Tensor2D, bits: int) -> Tensor2D:
    return fake_quantize(w, weight_config(bits))
