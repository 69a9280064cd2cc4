"""
Per-layer quantized weight cache.

Transformed and fake-quantized weights depend only on (layer, weight
variant, timestep group, weight bits), so each is built once and shared by
every denoising run that uses the same bank.
"""
from __future__ import annotations

import logging
import threading
from typing import Dict, Optional, Tuple

from core.tensor import Tensor2D
from services.quantizer import fake_quantize_weight
from services.rotation import BalancingParams, transform_weights

logger = logging.getLogger("trdq.layer_state")

WeightKey = Tuple[int, str, int, Optional[int]]


class LayerStateStore:
    """Thread-safe cache of H_t(W), optionally fake-quantized per output channel."""

    def __init__(self) -> None:
        self._weights: Dict[WeightKey, Tensor2D] = {}
        self._lock = threading.Lock()

    def weight(
        self,
        layer_id: int,
        variant: str,
        group: int,
        w: Tensor2D,
        params: BalancingParams,
        wbits: Optional[int],
    ) -> Tensor2D:
        key = (layer_id, variant, group, wbits)
        with self._lock:
            cached = self._weights.get(key)
        if cached is not None:
            return cached

        built = transform_weights(w, params)
        if wbits is not None:
            built = fake_quantize_weight(built, wbits)
        built.setflags(write=False)

        with self._lock:
            # Another thread may have won; keep the first copy.
            cached = self._weights.setdefault(key, built)
            if cached is built:
                logger.debug("Built weight layer=%d variant=%s group=%d bits=%s", layer_id, variant, group, wbits)
        return cached

