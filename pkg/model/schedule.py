"""
Noise schedule and deterministic DDIM update.

Linear betas over 1000 training steps; sampling visits round(linspace(999, 0, N)).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from core.errors import DomainError
from core.tensor import Tensor2D
from core.utils import round_half_away

TRAIN_STEPS = 1000
BETA_START = 1e-4
BETA_END = 0.02


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    steps: int
    train_steps: int = TRAIN_STEPS
    alphas_cumprod: npt.NDArray[np.float64] = field(init=False, repr=False)
    timesteps: npt.NDArray[np.int64] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.steps < 1 or self.steps > self.train_steps:
            raise DomainError(f"sampling steps must be in 1..{self.train_steps}, got {self.steps}")
        betas = np.linspace(BETA_START, BETA_END, self.train_steps, dtype=np.float64)
        object.__setattr__(self, "alphas_cumprod", np.cumprod(1.0 - betas))
        spaced = round_half_away(np.linspace(self.train_steps - 1, 0, self.steps))
        object.__setattr__(self, "timesteps", spaced.astype(np.int64))

    def train_timestep(self, t: int) -> int:
        """Training-schedule index visited at sampling step t (1-based)."""
        return int(self.timesteps[t - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alphas_cumprod[self.train_timestep(t)])

    def ddim_step(self, x_t: Tensor2D, eps: Tensor2D, t: int) -> Tensor2D:
        """Deterministic (eta = 0) move from step t to t + 1; the last step returns x0."""
        a_t = self.alpha_bar(t)
        a_next = self.alpha_bar(t + 1) if t < self.steps else 1.0
        x0 = (x_t - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
        return np.sqrt(a_next) * x0 + np.sqrt(1.0 - a_next) * eps
