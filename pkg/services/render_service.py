"""
Render service - heat-map images of attention similarity.

One cell per (block, timestep); red is a cosine near 1, blue near -1.
"""
from __future__ import annotations

import asyncio
import io
import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .attention_share import SimilarityMatrix

logger = logging.getLogger("trdq.render")

_LOW = (40, 70, 200)
_MID = (245, 245, 245)
_HIGH = (200, 30, 30)
_MISSING = (180, 180, 180)
# Glyph width of the default bitmap font.
_CHAR_W = 6


def cosine_color(value: float) -> Tuple[int, int, int]:
    """Diverging blue-white-red ramp over [-1, 1]."""
    if not np.isfinite(value):
        return _MISSING
    t = (min(1.0, max(-1.0, float(value))) + 1.0) / 2.0
    if t < 0.5:
        lo, hi, f = _LOW, _MID, t * 2.0
    else:
        lo, hi, f = _MID, _HIGH, (t - 0.5) * 2.0
    return tuple(int(round(a + (b - a) * f)) for a, b in zip(lo, hi))  # type: ignore[return-value]


def timestep_ticks(timesteps: Sequence[int], cell: int) -> List[Tuple[int, str]]:
    """(column, label) pairs, thinned so labels never overlap."""
    if not timesteps:
        return []
    widest = max(len(str(t)) for t in timesteps) * _CHAR_W + 2
    stride = max(1, math.ceil(widest / cell))
    return [(j, str(t)) for j, t in enumerate(timesteps) if j % stride == 0]


class RenderService:
    """Generate similarity heat maps."""

    async def render_heatmap(self, sim: SimilarityMatrix, *, cell: int = 28) -> bytes:
        return await asyncio.to_thread(self._render_heatmap_sync, sim, int(cell))

    def _render_heatmap_sync(self, sim: SimilarityMatrix, cell: int) -> bytes:
        cell = max(8, min(96, cell))
        grid = sim.grid()
        rows, cols = grid.shape
        padding = 12
        label_w = 64
        header_h = 36
        footer_h = 16

        width = label_w + cols * cell + padding * 2
        height = header_h + rows * cell + footer_h + padding * 2
        img = Image.new("RGB", (width, height), color="white")
        draw = ImageDraw.Draw(img)
        font = ImageFont.load_default()

        draw.text((padding, padding), "cond/uncond attention cosine (x: timestep, y: block)", fill="black", font=font)

        top = padding + header_h
        left = padding + label_w
        for i, block in enumerate(sim.blocks):
            draw.text((padding, top + i * cell + cell // 3), f"block {block}", fill="black", font=font)
            for j in range(cols):
                x0 = left + j * cell
                y0 = top + i * cell
                draw.rectangle([x0, y0, x0 + cell - 1, y0 + cell - 1], fill=cosine_color(grid[i, j]), outline=(255, 255, 255))

        bottom = top + rows * cell + 4
        for j, label in timestep_ticks(sim.timesteps, cell):
            x = left + j * cell + (cell - len(label) * _CHAR_W) // 2
            draw.text((x, bottom), label, fill="black", font=font)

        buf = io.BytesIO()
        img.save(buf, format="PNG", optimize=True)
        return buf.getvalue()


_render_service: Optional[RenderService] = None


def get_render_service() -> RenderService:
    """Get or create the global render service instance."""
    global _render_service
    if _render_service is None:
        _render_service = RenderService()
    return _render_service


async def render_heatmap(sim: SimilarityMatrix) -> bytes:
    return await get_render_service().render_heatmap(sim)
