"""Frozen toy transformer and adapter placement."""

from .base import (
    PROJECTIONS,
    BaseModel,
    Block,
    check_tokens,
    projection_shape,
    run_transformer,
)

from .adapted import (
    AdaptedModel,
    AdapterKind,
    PlacementMap,
    attach_adapters,
    count_active,
    count_trainable,
)

__all__ = [
    # Frozen base
    "PROJECTIONS",
    "BaseModel",
    "Block",
    "check_tokens",
    "projection_shape",
    "run_transformer",
    # Adapters on the base
    "AdaptedModel",
    "AdapterKind",
    "PlacementMap",
    "attach_adapters",
    "count_active",
    "count_trainable",
]
