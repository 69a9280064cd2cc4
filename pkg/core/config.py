"""
Pipeline configuration loading and validation.

Handles loading, validating, and normalizing the pipeline defaults file and
optional user override files. Command-line flags are layered on top by the
command handlers.
"""
from __future__ import annotations

import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .constants import K, SharePolicy
from .errors import TrdqError
from .io_utils import read_json
from .utils import is_int, is_power_of_two, is_real

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / "config.default.json"

DEPLOYABLE_BITS = (4, 6, 8)

# Seeds are stored as u64 in bank headers.
SEED_LIMIT = 1 << 64

DEFAULT_MODEL_CONFIG: Dict[str, Any] = {
    K.DIM: 64,
    K.HEADS: 4,
    K.BLOCKS: 4,
    K.TOKENS: 16,
    K.STEPS: 20,
    K.CFG_SCALE: 4.5,
    K.MODEL_SEED: 0,
    K.TIE_BRANCHES: True,
    K.MIRROR_CONDITION: False,
}

DEFAULT_CONFIG: Dict[str, Any] = {
    K.ALPHA: 0.5,
    K.BLOCK_SIZE: 16,
    K.MAX_GREEDY_STEPS: 8,
    K.STOP_TOL: 1e-3,
    K.ROTATION_SEED: 0,
    K.GROUPING: "per-step",
    K.WEIGHT_BITS: 8,
    K.ACT_BITS: 8,
    K.SHARE_THRESHOLD: 0.95,
    K.SHARE_POLICY: SharePolicy.ALL_TIMESTEPS,
    K.CALIB_CONDITIONS: 8,
    K.CALIB_SEED: 1000,
    K.EVAL_SEEDS: 8,
    K.EVAL_SEED_BASE: 0,
    K.MODEL: dict(DEFAULT_MODEL_CONFIG),
}

CONFIG_SCHEMA: Dict[str, Tuple[str, bool]] = {
    K.ALPHA: ("unit_float", True),
    K.BLOCK_SIZE: ("pow2", True),
    K.MAX_GREEDY_STEPS: ("pos_int", True),
    K.STOP_TOL: ("nonneg_float", True),
    K.ROTATION_SEED: ("seed", True),
    K.GROUPING: ("grouping", True),
    K.WEIGHT_BITS: ("bits", True),
    K.ACT_BITS: ("bits", True),
    K.SHARE_THRESHOLD: ("pos_float", True),
    K.SHARE_POLICY: ("policy", False),
    K.CALIB_CONDITIONS: ("pos_int", True),
    K.CALIB_SEED: ("seed", True),
    K.EVAL_SEEDS: ("pos_int", True),
    K.EVAL_SEED_BASE: ("seed", False),
    K.MODEL: ("model", True),
}

MODEL_SCHEMA: Dict[str, Tuple[str, bool]] = {
    K.DIM: ("pos_int", True),
    K.HEADS: ("pos_int", True),
    K.BLOCKS: ("pos_int", True),
    K.TOKENS: ("pos_int", True),
    K.STEPS: ("pos_int", True),
    K.CFG_SCALE: ("nonneg_float", True),
    K.MODEL_SEED: ("seed", True),
    K.TIE_BRANCHES: ("bool", False),
    K.MIRROR_CONDITION: ("bool", False),
}

GROUPING_RE = re.compile(r"^(?:per[-_]step|buckets:(\d+))$")


class ConfigError(TrdqError):
    pass


def _check_value(key: str, type_name: str, value: Any, errors: List[str]) -> Any:
    if type_name in ("pos_int", "nonneg_int"):
        if not is_int(value) or value < (1 if type_name == "pos_int" else 0):
            kind = "positive" if type_name == "pos_int" else "non-negative"
            errors.append(f"{key} must be a {kind} integer")
            return None
        return int(value)
    if type_name == "seed":
        if not is_int(value) or not 0 <= value < SEED_LIMIT:
            errors.append(f"{key} must be an integer in [0, 2**64)")
            return None
        return int(value)
    if type_name == "pow2":
        if not is_int(value) or not is_power_of_two(value):
            errors.append(f"{key} must be a power of two")
            return None
        return int(value)
    if type_name == "bits":
        if not is_int(value) or value not in DEPLOYABLE_BITS:
            errors.append(f"{key} must be one of {list(DEPLOYABLE_BITS)}")
            return None
        return int(value)
    if type_name == "unit_float":
        if not is_real(value) or not 0.0 <= float(value) <= 1.0:
            errors.append(f"{key} must be a number in [0, 1]")
            return None
        return float(value)
    if type_name == "pos_float":
        if not is_real(value) or float(value) <= 0.0:
            errors.append(f"{key} must be a positive number")
            return None
        return float(value)
    if type_name == "nonneg_float":
        if not is_real(value) or float(value) < 0.0:
            errors.append(f"{key} must be a non-negative number")
            return None
        return float(value)
    if type_name == "bool":
        if not isinstance(value, bool):
            errors.append(f"{key} must be a boolean")
            return None
        return value
    if type_name == "grouping":
        if not isinstance(value, str) or not GROUPING_RE.fullmatch(value.strip().lower()):
            errors.append(f"{key} must be 'per-step' or 'buckets:<k>'")
            return None
        match = GROUPING_RE.fullmatch(value.strip().lower())
        if match and match.group(1) is not None and int(match.group(1)) < 1:
            errors.append(f"{key} bucket count must be at least 1")
            return None
        return value.strip().lower().replace("_", "-")
    if type_name == "policy":
        if value not in (SharePolicy.ALL_TIMESTEPS, SharePolicy.PER_TIMESTEP):
            errors.append(f"{key} must be '{SharePolicy.ALL_TIMESTEPS}' or '{SharePolicy.PER_TIMESTEP}'")
            return None
        return value
    errors.append(f"Unknown config type for {key}")
    return None


def _normalize_section(
    data: Dict[str, Any],
    schema: Dict[str, Tuple[str, bool]],
    defaults: Dict[str, Any],
    errors: List[str],
    prefix: str = "",
) -> Dict[str, Any]:
    normalized: Dict[str, Any] = {}
    for key, (type_name, required) in schema.items():
        label = f"{prefix}{key}"
        if key not in data:
            if required:
                errors.append(f"Missing required config key: {label}")
            else:
                normalized[key] = defaults.get(key)
            continue
        value = data[key]
        if type_name == "model":
            if not isinstance(value, dict):
                errors.append(f"{label} must be a dict/object")
                continue
            merged = dict(DEFAULT_MODEL_CONFIG)
            merged.update(value)
            normalized[key] = _normalize_section(merged, MODEL_SCHEMA, DEFAULT_MODEL_CONFIG, errors, f"{key}.")
            continue
        checked = _check_value(label, type_name, value, errors)
        if checked is not None:
            normalized[key] = checked
    unknown = sorted(set(data) - set(schema))
    for key in unknown:
        errors.append(f"Unknown config key: {prefix}{key}")
    return normalized


def validate_and_normalize_config(data: Dict[str, Any]) -> Dict[str, Any]:
    errors: List[str] = []
    normalized = _normalize_section(data, CONFIG_SCHEMA, DEFAULT_CONFIG, errors)

    if errors:
        raise ConfigError("; ".join(errors))

    model = normalized[K.MODEL]
    if model[K.DIM] % model[K.HEADS] != 0:
        raise ConfigError("model.dim must be divisible by model.heads")
    if model[K.DIM] % normalized[K.BLOCK_SIZE] != 0:
        raise ConfigError("model.dim must be divisible by block_size")

    return normalized


def merge_config(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Overlay non-None overrides; the model section merges key by key."""
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if key == K.MODEL and isinstance(value, dict):
            model = dict(merged.get(K.MODEL) or {})
            model.update({k: v for k, v in value.items() if v is not None})
            merged[K.MODEL] = model
        else:
            merged[key] = value
    return merged


async def load_default_template(path: Path = DEFAULT_CONFIG_PATH) -> Dict[str, Any]:
    """Built-in defaults overlaid with the defaults file, when one exists."""
    if not path.exists():
        return merge_config(DEFAULT_CONFIG, {})
    data = await read_json(path, default=None)
    if data is None:
        raise ConfigError(f"Unreadable defaults file: {path}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path.name} must be a JSON object")
    return merge_config(DEFAULT_CONFIG, data)


async def load_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    merged = await load_default_template()
    if path is not None:
        data = await read_json(path, default=None)
        if data is None:
            raise ConfigError(f"Missing or unreadable config file: {path}")
        if not isinstance(data, dict):
            raise ConfigError("Config override file must be a JSON object")
        merged = merge_config(merged, data)
    if overrides:
        merged = merge_config(merged, overrides)
    return validate_and_normalize_config(merged)
