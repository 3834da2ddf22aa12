"""Gated mixture of LoRA experts.

A standard layer owns a linear gate. A simplified layer has no gate and
reuses the decision of a donor layer in the same block (``mlp_gate`` feeds
``mlp_up`` and ``mlp_down``). Routing happens once per instance: every token
position sees the same ``GateOutput``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from awaker_moe.errors import ConfigError, InputError, RoutingError
from awaker_moe.tensor import DEFAULT_DTYPE, Tensor, concat, softmax_row

from .lora import GlobalExpert, LoRAExpert, lora_delta


@dataclass
class GateLayer:
    """Linear router ``W_G`` with temperature and training noise.

    Attributes:
        weight: ``n x d_gate`` routing matrix.
        temperature: Logits are divided by this before the softmax.
        noise_sigma: Standard deviation of the Gaussian logit noise (train only).
        top_k: Number of experts kept per instance.
    """

    weight: Tensor
    temperature: float = 1.0
    noise_sigma: float = 0.01
    top_k: int = 1

    def __post_init__(self):
        n = self.weight.shape[0] if self.weight.ndim == 2 else 0
        if n < 1:
            raise ConfigError(f"gate needs at least one expert, got weight shape {self.weight.shape}")
        if not 1 <= self.top_k <= n:
            raise ConfigError(f"top_k={self.top_k} must lie in [1, {n}]")

    @property
    def n_experts(self) -> int:
        return self.weight.shape[0]

    @property
    def d_gate(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def zeros(cls, n: int, d_gate: int, dtype=DEFAULT_DTYPE, **kwargs) -> "GateLayer":
        """Zero-initialized gate: uniform probabilities, expert 0 wins ties."""
        return cls(Tensor(np.zeros((n, d_gate), dtype=dtype), requires_grad=True), **kwargs)

    @classmethod
    def init(cls, n: int, d_gate: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE, **kwargs) -> "GateLayer":
        """Gate with ``W_G ~ N(0, 1/d_gate)``."""
        weight = rng.normal(0.0, 1.0 / np.sqrt(d_gate), size=(n, d_gate)).astype(dtype)
        return cls(Tensor(weight, requires_grad=True), **kwargs)


@dataclass
class GateOutput:
    """Routing decision of one gate for one instance.

    ``g_experts`` is zero outside ``selected``. The global weight is
    ``1 - g_max`` where ``g_max`` is the largest kept probability; kept
    probabilities are not renormalized.
    """

    selected: tuple[int, ...]
    probs: Tensor
    g_experts: Tensor
    g_max: Tensor
    g_global: Tensor
    gate_input: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def expert(self) -> int:
        return self.selected[0]

    def same_decision(self, other: "GateOutput") -> bool:
        """True when both outputs pick the same experts with the same weights."""
        return (
            self.selected == other.selected
            and np.array_equal(self.g_experts.data, other.g_experts.data)
            and np.array_equal(self.g_global.data, other.g_global.data)
        )

    def to_dict(self) -> dict:
        return {
            "selected": list(self.selected),
            "probs": [float(p) for p in self.probs.data],
            "g_max": float(self.g_max.data),
            "g_global": float(self.g_global.data),
        }


def gate_forward(
    gate: GateLayer,
    x_gate: Tensor,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> GateOutput:
    """Route one instance.

    ``logits = W_G x / tau``; in training, Gaussian noise is added to the
    logits before the softmax. The top-k probabilities are kept as they are
    and the global expert receives ``1 - max``. Equal probabilities resolve
    to the lowest expert index.

    Raises:
        ConfigError: If the temperature is not positive, or noise is needed
            and no generator was given.
    """
    if not gate.temperature > 0:
        raise ConfigError(f"gate temperature must be positive, got {gate.temperature}")
    if not isinstance(x_gate, Tensor):
        x_gate = Tensor(x_gate)
    logits = (gate.weight @ x_gate) * (1.0 / gate.temperature)
    if train_mode and gate.noise_sigma > 0:
        if rng is None:
            raise ConfigError("training-mode routing with noise needs a random generator")
        logits = logits + rng.normal(0.0, gate.noise_sigma, size=gate.n_experts).astype(logits.dtype)
    probs = softmax_row(logits)

    order = np.argsort(-probs.data, kind="stable")
    selected = tuple(int(i) for i in order[: gate.top_k])
    mask = np.zeros(gate.n_experts, dtype=probs.dtype)
    mask[list(selected)] = 1.0
    g_max = probs[selected[0]]
    return GateOutput(
        selected=selected,
        probs=probs,
        g_experts=probs * mask,
        g_max=g_max,
        g_global=1.0 - g_max,
        gate_input=np.array(x_gate.data, copy=True),
    )


@dataclass
class MoEAdapterLayer:
    """Experts, the global expert and (unless simplified) a gate at one projection.

    Attributes:
        experts: Routed LoRA experts.
        global_expert: Always-active expert.
        gate: Router, or None for a simplified layer.
        block: Index of the transformer block.
        projection: Projection name within the block.
        donor: Gated layer whose decision a simplified layer reuses.
    """

    experts: list[LoRAExpert]
    global_expert: GlobalExpert
    gate: Optional[GateLayer] = None
    block: int = 0
    projection: str = ""
    donor: Optional["MoEAdapterLayer"] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.experts:
            raise ConfigError(f"MoE layer {self.layer_id} needs at least one expert")
        if self.gate is not None and self.gate.n_experts != len(self.experts):
            raise ConfigError(
                f"gate of {self.layer_id} routes {self.gate.n_experts} experts, layer has {len(self.experts)}"
            )

    @property
    def layer_id(self) -> str:
        return f"blocks.{self.block}.{self.projection}"

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def is_simplified(self) -> bool:
        return self.gate is None

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for m, expert in enumerate(self.experts):
            params.update(expert.parameters(f"{prefix}.experts.{m}"))
        params.update(self.global_expert.parameters(f"{prefix}.global"))
        if self.gate is not None:
            params[f"{prefix}.gate.W"] = self.gate.weight
        return params


def bind_simplified(consumer: MoEAdapterLayer, donor: MoEAdapterLayer) -> None:
    """Make ``consumer`` reuse ``donor``'s gate decisions.

    Raises:
        ConfigError: If the donor has no gate, the consumer has one, or the
            expert counts differ.
    """
    if donor.gate is None:
        raise ConfigError(f"donor {donor.layer_id} has no gate to share")
    if consumer.gate is not None:
        raise ConfigError(f"{consumer.layer_id} owns a gate and cannot consume another layer's")
    if consumer.n_experts != donor.n_experts:
        raise ConfigError(
            f"{consumer.layer_id} has {consumer.n_experts} experts, donor {donor.layer_id} has {donor.n_experts}"
        )
    consumer.donor = donor


def unbind_simplified(consumer: MoEAdapterLayer) -> None:
    consumer.donor = None


def moe_forward(layer: MoEAdapterLayer, x: Tensor, go: GateOutput, base_out: Tensor) -> Tensor:
    """``base_out`` plus the weighted selected experts and the weighted global expert.

    Only the selected experts are evaluated.

    Raises:
        RoutingError: If ``layer`` is simplified and not bound to a donor.
    """
    if layer.is_simplified and layer.donor is None:
        raise RoutingError(f"simplified MoE layer {layer.layer_id} is not bound to a gated donor")
    if len(go.g_experts) != layer.n_experts:
        raise RoutingError(
            f"{layer.layer_id} has {layer.n_experts} experts, decision covers {len(go.g_experts)}"
        )
    out = base_out
    for m in go.selected:
        out = out + go.g_experts[m] * lora_delta(layer.experts[m], x)
    return out + go.g_global * lora_delta(layer.global_expert, x)


def moe_forward_tokens(layer: MoEAdapterLayer, x: Tensor, outputs: Sequence[GateOutput], base_out: Tensor) -> Tensor:
    """Token-level variant of ``moe_forward``: row ``t`` of ``x`` is mixed by ``outputs[t]``.

    Raises:
        RoutingError: If the layer is an unbound simplified layer or the
            decisions do not cover every row.
    """
    if layer.is_simplified and layer.donor is None:
        raise RoutingError(f"simplified MoE layer {layer.layer_id} is not bound to a gated donor")
    if len(outputs) != x.shape[0]:
        raise RoutingError(f"{layer.layer_id}: {len(outputs)} token decisions for {x.shape[0]} positions")
    weights = concat([go.g_experts.reshape(1, layer.n_experts) for go in outputs], axis=0)
    global_weights = concat([go.g_global.reshape(1, 1) for go in outputs], axis=0)
    out = base_out
    for m in sorted({m for go in outputs for m in go.selected}):
        out = out + weights[:, m : m + 1] * lora_delta(layer.experts[m], x)
    return out + global_weights * lora_delta(layer.global_expert, x)


def balance_loss(outputs: Sequence[GateOutput]) -> Tensor:
    """Squared coefficient of variation of per-expert importance.

    Importance is the sum of gate probabilities over ``outputs``; the loss is
    zero when every expert receives the same total probability.

    Raises:
        InputError: If ``outputs`` is empty.
    """
    if not outputs:
        raise InputError("balance_loss needs at least one gate output")
    importance = outputs[0].probs
    for go in outputs[1:]:
        importance = importance + go.probs
    mean = importance.mean()
    variance = ((importance - mean) ** 2).mean()
    return variance / (mean * mean)
