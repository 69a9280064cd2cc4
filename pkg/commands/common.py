"""
Shared command-line plumbing: model flags and config resolution.
"""
from __future__ import annotations

import argparse
from pathlib import Path
from typing import Any, Dict, Optional

from core.config import ConfigError, load_config
from core.constants import Component, K
from model.toy_dit import ToyDiTConfig
from services.rotation import RotationBuildConfig


def add_model_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("model")
    group.add_argument("--dim", type=int, default=None, help="embedding width")
    group.add_argument("--heads", type=int, default=None, help="attention heads")
    group.add_argument("--blocks", type=int, default=None, help="transformer blocks")
    group.add_argument("--tokens", type=int, default=None, help="latent tokens")
    group.add_argument("--steps", type=int, default=None, help="denoising steps")
    group.add_argument("--cfg-scale", type=float, default=None, help="classifier-free guidance scale")
    group.add_argument("--model-seed", type=int, default=None, help="weight initialization seed")
    group.add_argument(
        "--untie-branches",
        dest="tie_branches",
        action="store_const",
        const=False,
        default=None,
        help="give the unconditional branch its own qkv weights",
    )
    group.add_argument(
        "--mirror-condition",
        action="store_const",
        const=True,
        default=None,
        help="feed the condition to the unconditional branch as well",
    )


def model_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        K.DIM: args.dim,
        K.HEADS: args.heads,
        K.BLOCKS: args.blocks,
        K.TOKENS: args.tokens,
        K.STEPS: args.steps,
        K.CFG_SCALE: args.cfg_scale,
        K.MODEL_SEED: args.model_seed,
        K.TIE_BRANCHES: args.tie_branches,
        K.MIRROR_CONDITION: args.mirror_condition,
    }


async def resolve_config(args: argparse.Namespace, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """defaults < config.default.json < --config < flags."""
    merged = dict(overrides or {})
    merged[K.MODEL] = model_overrides(args)
    path = Path(args.config) if getattr(args, "config", None) else None
    return await load_config(path, merged)


def model_config(cfg: Dict[str, Any]) -> ToyDiTConfig:
    return ToyDiTConfig.from_config(cfg[K.MODEL])


def rotation_config(cfg: Dict[str, Any]) -> RotationBuildConfig:
    return RotationBuildConfig(
        block_size=cfg[K.BLOCK_SIZE],
        max_greedy_steps=cfg[K.MAX_GREEDY_STEPS],
        rng_seed=cfg[K.ROTATION_SEED],
        stop_tol=cfg[K.STOP_TOL],
    )


def parse_ablation(text: Optional[str]) -> frozenset[str]:
    if not text:
        return frozenset()
    names = {part.strip().lower() for part in text.split(",") if part.strip()}
    unknown = sorted(names - set(Component.ALL))
    if unknown:
        raise ConfigError(f"unknown ablation component(s) {unknown}; choose from {list(Component.ALL)}")
    return frozenset(names)
