"""
Configuration key constants.

Using constants instead of string literals provides:
- IDE autocomplete
- Typo protection (caught at import time)
- Single source of truth for key names
"""
from __future__ import annotations


class ConfigKey:
    """All configuration keys used in pipeline configs."""

    # Smoothing
    ALPHA = "alpha"

    # Rotation construction
    BLOCK_SIZE = "block_size"
    MAX_GREEDY_STEPS = "max_greedy_steps"
    STOP_TOL = "stop_tol"
    ROTATION_SEED = "rotation_seed"

    # Time bank
    GROUPING = "grouping"

    # Quantization
    WEIGHT_BITS = "weight_bits"
    ACT_BITS = "act_bits"

    # Attention sharing
    SHARE_THRESHOLD = "share_threshold"
    SHARE_POLICY = "share_policy"

    # Calibration / evaluation runs
    CALIB_CONDITIONS = "calib_conditions"
    CALIB_SEED = "calib_seed"
    EVAL_SEEDS = "eval_seeds"
    EVAL_SEED_BASE = "eval_seed_base"

    # Toy model
    MODEL = "model"
    DIM = "dim"
    HEADS = "heads"
    BLOCKS = "blocks"
    TOKENS = "tokens"
    STEPS = "steps"
    CFG_SCALE = "cfg_scale"
    MODEL_SEED = "seed"
    TIE_BRANCHES = "tie_branches"
    MIRROR_CONDITION = "mirror_condition"


class Granularity:
    """Quantization group layouts."""
    PER_TOKEN = "per_token"
    PER_CHANNEL = "per_channel"
    PER_GROUP = "per_group"


class Branch:
    """CFG branches."""
    CONDITIONAL = 0
    UNCONDITIONAL = 1

    @staticmethod
    def name(value: int) -> str:
        return "conditional" if value == Branch.CONDITIONAL else "unconditional"


class RecordKind:
    """Bit flags packed into the trace record branch byte."""
    BRANCH_MASK = 0x01
    ATTENTION = 0x02


class GroupingKind:
    """Timestep grouping modes for the parameter bank."""
    PER_STEP = 0
    BUCKETS = 1


class SharePolicy:
    """Attention-sharing decision policies."""
    ALL_TIMESTEPS = "all_timesteps"
    PER_TIMESTEP = "per_timestep"


class Component:
    """Balancing components that can be ablated."""
    SMOOTH = "smooth"
    R1 = "r1"
    P = "p"
    R2 = "r2"
    TIME_ROTATION = "tr"

    ALL = (SMOOTH, R1, P, R2, TIME_ROTATION)


class Layer:
    """Linear layer slots inside one transformer block."""
    QKV = 0
    PROJ = 1
    FC1 = 2
    FC2 = 3

    PER_BLOCK = 4
    NAMES = ("qkv", "proj", "fc1", "fc2")


# Shorthand alias for cleaner imports
K = ConfigKey
