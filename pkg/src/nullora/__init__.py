"""Null-space constrained, cross-frozen low-rank adapters for dense weights."""

from nullora.adapter import (
    AdapterLayer,
    GradientSet,
    InvariantReport,
    LayerSkipped,
    Mode,
    backward,
    delta_weight,
    effective_rank,
    forward,
    init_ablation,
    init_null_lora,
    init_vanilla_lora,
    merge,
    verify_invariants,
)

__all__ = [
    "AdapterLayer",
    "GradientSet",
    "InvariantReport",
    "LayerSkipped",
    "Mode",
    "backward",
    "delta_weight",
    "effective_rank",
    "forward",
    "init_ablation",
    "init_null_lora",
    "init_vanilla_lora",
    "merge",
    "verify_invariants",
]

__version__ = "0.1.0"
