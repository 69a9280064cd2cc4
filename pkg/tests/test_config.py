from __future__ import annotations

import asyncio
import json

import pytest

from core.config import (
    DEFAULT_CONFIG,
    ConfigError,
    load_config,
    load_default_template,
    merge_config,
    validate_and_normalize_config,
)
from core.constants import K


def test_defaults_file_matches_builtin_defaults():
    assert asyncio.run(load_config()) == DEFAULT_CONFIG


def test_override_file_and_flags(tmp_path):
    path = tmp_path / "override.json"
    path.write_text(json.dumps({"alpha": 0.25, "model": {"steps": 10}}), encoding="utf-8")
    cfg = asyncio.run(load_config(path, {K.GROUPING: "Buckets:4", K.MODEL: {K.DIM: 48}}))
    assert cfg[K.ALPHA] == 0.25
    assert cfg[K.GROUPING] == "buckets:4"
    assert cfg[K.MODEL][K.STEPS] == 10
    assert cfg[K.MODEL][K.DIM] == 48
    assert cfg[K.MODEL][K.HEADS] == 4


def test_missing_override_file(tmp_path):
    with pytest.raises(ConfigError):
        asyncio.run(load_config(tmp_path / "absent.json"))


@pytest.mark.parametrize(
    "override",
    [
        {"unknown_key": 1},
        {K.WEIGHT_BITS: 5},
        {K.ACT_BITS: True},
        {K.BLOCK_SIZE: 12},
        {K.ALPHA: 1.5},
        {K.GROUPING: "weekly"},
        {K.GROUPING: "buckets:0"},
        {K.SHARE_THRESHOLD: 0.0},
        {K.SHARE_POLICY: "sometimes"},
        {K.MODEL: {K.DIM: 40}},
        {K.MODEL: {K.DIM: 66, K.HEADS: 3}},
        {K.MODEL: {K.TIE_BRANCHES: "yes"}},
        {K.MODEL: {"depth": 3}},
        {K.ROTATION_SEED: 2**64},
        {K.CALIB_SEED: -1},
        {K.MODEL: {K.MODEL_SEED: 2**70}},
    ],
)
def test_invalid_values_rejected(override):
    with pytest.raises(ConfigError):
        validate_and_normalize_config(merge_config(DEFAULT_CONFIG, override))


def test_errors_are_collected():
    with pytest.raises(ConfigError) as excinfo:
        validate_and_normalize_config(merge_config(DEFAULT_CONFIG, {K.WEIGHT_BITS: 3, K.ALPHA: -1}))
    message = str(excinfo.value)
    assert "weight_bits" in message and "alpha" in message


def test_merge_skips_none_and_merges_model():
    base = {"a": 1, K.MODEL: {K.DIM: 1, K.HEADS: 2}}
    merged = merge_config(base, {"a": None, "b": 2, K.MODEL: {K.DIM: 3, K.HEADS: None}})
    assert merged == {"a": 1, "b": 2, K.MODEL: {K.DIM: 3, K.HEADS: 2}}
    assert base[K.MODEL] == {K.DIM: 1, K.HEADS: 2}


def test_largest_seed_accepted():
    cfg = validate_and_normalize_config(merge_config(DEFAULT_CONFIG, {K.ROTATION_SEED: 2**64 - 1}))
    assert cfg[K.ROTATION_SEED] == 2**64 - 1


def test_malformed_defaults_file(tmp_path):
    path = tmp_path / "config.default.json"
    path.write_text('{"alpha": 0.5,', encoding="utf-8")
    with pytest.raises(ConfigError):
        asyncio.run(load_default_template(path))
    path.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigError):
        asyncio.run(load_default_template(path))
    assert asyncio.run(load_default_template(tmp_path / "absent.json")) == DEFAULT_CONFIG
