from __future__ import annotations

import numpy as np
import pytest

from model.toy_dit import ToyDiTConfig
from services.rotation import RotationBuildConfig


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg() -> ToyDiTConfig:
    return ToyDiTConfig(dim=32, heads=2, blocks=2, tokens=8, steps=6)


@pytest.fixture
def rotation_cfg() -> RotationBuildConfig:
    return RotationBuildConfig(block_size=16, max_greedy_steps=8, rng_seed=0, stop_tol=1e-3)
