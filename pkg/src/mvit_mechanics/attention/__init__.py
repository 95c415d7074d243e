"""Pooling, full and window attention with relative position terms."""

from .attention import (
    FAULTS,
    active_fault,
    attention,
    inject_fault,
    pooling_attention,
    record_shapes,
    relpos_coords,
    window_attention,
)
from .oracle import attention_oracle
from .pooling import pool
from .relpos import relpos_bias, relpos_extended_terms, relpos_key_bias, relpos_value_term, shared_coords
from .types import (
    KINDS,
    POOL_MODES,
    RELPOS_MODES,
    RELPOS_TERMS,
    WINDOW_KINDS,
    AttentionParams,
    AttentionSpec,
    RelPosTables,
    SpecError,
    truncated_normal,
)
from .windows import WindowLayout, hwin_schedule, window_layout, window_merge, window_partition

__all__ = [
    "FAULTS", "KINDS", "POOL_MODES", "RELPOS_MODES", "RELPOS_TERMS", "WINDOW_KINDS",
    "AttentionParams", "AttentionSpec", "RelPosTables", "SpecError", "WindowLayout",
    "active_fault", "attention", "attention_oracle", "hwin_schedule", "inject_fault", "pool",
    "pooling_attention", "record_shapes", "relpos_bias", "relpos_coords", "relpos_extended_terms", "relpos_key_bias",
    "relpos_value_term", "shared_coords", "truncated_normal", "window_attention", "window_layout",
    "window_merge", "window_partition",
]
