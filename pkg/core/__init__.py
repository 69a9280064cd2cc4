"""
Core utilities and infrastructure for the quantization pipeline.

This package contains:
- config: Configuration loading and validation
- constants: Configuration keys and enums
- errors: Exception hierarchy and exit codes
- io_utils: File I/O helpers
- tensor: Dense 2-D tensor substrate
- trace_storage / bank_storage: Binary trace and parameter-bank codecs
- types: Dataclasses and type definitions
- utils: General utilities
"""
from .constants import Branch, Component, ConfigKey, Granularity, K
from .errors import CoverageError, DomainError, FormatError, ShapeError, TrdqError
from .types import AttentionRecord, LayerError, OutputMetrics, QuantMetrics, TimestepTrace

__all__ = [
    # Constants
    "Branch",
    "Component",
    "ConfigKey",
    "Granularity",
    "K",
    # Errors
    "CoverageError",
    "DomainError",
    "FormatError",
    "ShapeError",
    "TrdqError",
    # Types
    "AttentionRecord",
    "LayerError",
    "OutputMetrics",
    "QuantMetrics",
    "TimestepTrace",
]
