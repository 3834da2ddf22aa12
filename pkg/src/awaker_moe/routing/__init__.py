"""Instance-level routing and routing statistics."""

from .context import (
    INSTANCE_MODES,
    POOLINGS,
    ROUTING_MODES,
    InstanceSegments,
    RoutingContext,
    RoutingDecision,
    build_gate_input,
    route_instance,
)

from .stats import (
    DEFAULT_REFERENCE,
    RoutingStats,
    entropy_bits,
    flip_rate,
    mutual_information,
    routing_stats,
)

__all__ = [
    # Routing contexts
    "INSTANCE_MODES",
    "POOLINGS",
    "ROUTING_MODES",
    "InstanceSegments",
    "RoutingContext",
    "RoutingDecision",
    "build_gate_input",
    "route_instance",
    # Statistics
    "DEFAULT_REFERENCE",
    "RoutingStats",
    "entropy_bits",
    "flip_rate",
    "mutual_information",
    "routing_stats",
]
