"""LoRA experts and gated mixture-of-experts adapter layers."""

from .lora import GlobalExpert, LoRAExpert, lora_delta

from .moe import (
    GateLayer,
    GateOutput,
    MoEAdapterLayer,
    balance_loss,
    bind_simplified,
    gate_forward,
    moe_forward,
    moe_forward_tokens,
    unbind_simplified,
)

__all__ = [
    # Experts
    "GlobalExpert",
    "LoRAExpert",
    "lora_delta",
    # Gating and MoE layers
    "GateLayer",
    "GateOutput",
    "MoEAdapterLayer",
    "balance_loss",
    "bind_simplified",
    "gate_forward",
    "moe_forward",
    "moe_forward_tokens",
    "unbind_simplified",
]
