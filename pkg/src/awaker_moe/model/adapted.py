"""Adapter placement and the adapted model.

The published placement puts a single LoRA on q/k/v, a gated MoE on ``o``
and ``mlp_gate``, and simplified MoE layers on ``mlp_up``/``mlp_down`` that
reuse the ``mlp_gate`` decision. Stage-I training uses a single LoRA on every
projection instead.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Iterator, Optional, Union

import numpy as np

from awaker_moe.adapters import (
    GateLayer,
    GlobalExpert,
    LoRAExpert,
    MoEAdapterLayer,
    bind_simplified,
    lora_delta,
    moe_forward,
    moe_forward_tokens,
)
from awaker_moe.config import TRAINABLE_GROUPS, AdapterConfig
from awaker_moe.errors import ConfigError, RoutingError
from awaker_moe.tensor import Tensor

from .base import PROJECTIONS, BaseModel, check_tokens, projection_shape, run_transformer

if TYPE_CHECKING:
    from awaker_moe.routing import RoutingContext

logger = logging.getLogger(__name__)


class AdapterKind(str, Enum):
    """What is attached at one projection."""

    SINGLE_LORA = "single_lora"
    GATED_MOE = "gated_moe"
    SIMPLIFIED_MOE = "simplified_moe"


@dataclass(frozen=True)
class PlacementMap:
    """Adapter kind per projection, and the donor of each simplified layer."""

    kinds: dict[str, AdapterKind]
    donors: dict[str, str] = field(default_factory=dict)

    @classmethod
    def awaker(cls) -> "PlacementMap":
        """Single LoRA on q/k/v, gated MoE on o and mlp_gate, mlp_up/down reuse mlp_gate."""
        return cls(
            kinds={
                "q": AdapterKind.SINGLE_LORA,
                "k": AdapterKind.SINGLE_LORA,
                "v": AdapterKind.SINGLE_LORA,
                "o": AdapterKind.GATED_MOE,
                "mlp_gate": AdapterKind.GATED_MOE,
                "mlp_up": AdapterKind.SIMPLIFIED_MOE,
                "mlp_down": AdapterKind.SIMPLIFIED_MOE,
            },
            donors={"mlp_up": "mlp_gate", "mlp_down": "mlp_gate"},
        )

    @classmethod
    def single_lora(cls) -> "PlacementMap":
        """One LoRA on every projection (Stage I and the LoRA baseline)."""
        return cls(kinds={name: AdapterKind.SINGLE_LORA for name in PROJECTIONS})

    def validate(self) -> None:
        """Raises ConfigError unless the map covers every projection consistently."""
        if set(self.kinds) != set(PROJECTIONS):
            raise ConfigError(f"placement must cover {PROJECTIONS}, got {sorted(self.kinds)}")
        for name, kind in self.kinds.items():
            donor = self.donors.get(name)
            if kind is AdapterKind.SIMPLIFIED_MOE:
                if donor is None:
                    raise ConfigError(f"simplified MoE at {name} names no donor")
                if self.kinds.get(donor) is not AdapterKind.GATED_MOE:
                    raise ConfigError(f"donor {donor} of {name} is not a gated MoE layer")
            elif donor is not None:
                raise ConfigError(f"{name} is {kind.value} and cannot take a donor")

    @property
    def has_moe(self) -> bool:
        return any(kind is not AdapterKind.SINGLE_LORA for kind in self.kinds.values())

    def gated(self) -> list[str]:
        return [name for name in PROJECTIONS if self.kinds[name] is AdapterKind.GATED_MOE]

    def to_dict(self) -> dict:
        return {
            "kinds": {name: self.kinds[name].value for name in PROJECTIONS},
            "donors": dict(sorted(self.donors.items())),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PlacementMap":
        placement = cls(
            kinds={name: AdapterKind(kind) for name, kind in data["kinds"].items()},
            donors=dict(data.get("donors", {})),
        )
        placement.validate()
        return placement


Adapter = Union[LoRAExpert, MoEAdapterLayer]


class AdaptedModel:
    """A frozen base with adapters attached per a placement map.

    Attributes:
        base: The shared frozen model; never written to.
        placement: Adapter kind per projection.
        adapter_config: Expert and gate hyperparameters.
        sites: Per block, the adapter attached at each projection.
    """

    def __init__(
        self,
        base: BaseModel,
        placement: PlacementMap,
        adapter_config: AdapterConfig,
        sites: list[dict[str, Adapter]],
    ):
        self.base = base
        self.placement = placement
        self.adapter_config = adapter_config
        self.sites = sites

    @property
    def config(self):
        return self.base.config

    @property
    def n_blocks(self) -> int:
        return len(self.sites)

    @property
    def has_moe(self) -> bool:
        return self.placement.has_moe

    def lora(self, block: int, name: str) -> LoRAExpert:
        site = self.sites[block][name]
        if not isinstance(site, LoRAExpert):
            raise ConfigError(f"blocks.{block}.{name} holds an MoE layer, not a single LoRA")
        return site

    def moe(self, block: int, name: str) -> MoEAdapterLayer:
        site = self.sites[block][name]
        if not isinstance(site, MoEAdapterLayer):
            raise ConfigError(f"blocks.{block}.{name} holds a single LoRA, not an MoE layer")
        return site

    def moe_layers(self) -> Iterator[MoEAdapterLayer]:
        for block in self.sites:
            for name in PROJECTIONS:
                if isinstance(block[name], MoEAdapterLayer):
                    yield block[name]

    def gated_layers(self) -> list[MoEAdapterLayer]:
        """Layers owning a gate, in forward order."""
        return [layer for layer in self.moe_layers() if not layer.is_simplified]

    # -- parameters ----------------------------------------------------------

    def parameter_groups(self) -> dict[str, dict[str, Tensor]]:
        """Adapter tensors by trainable group: lora, experts, global, gates."""
        groups: dict[str, dict[str, Tensor]] = {name: {} for name in TRAINABLE_GROUPS}
        for b, block in enumerate(self.sites):
            for name in PROJECTIONS:
                site = block[name]
                prefix = f"blocks.{b}.{name}"
                if isinstance(site, LoRAExpert):
                    groups["lora"].update(site.parameters(f"{prefix}.lora"))
                    continue
                for m, expert in enumerate(site.experts):
                    groups["experts"].update(expert.parameters(f"{prefix}.experts.{m}"))
                groups["global"].update(site.global_expert.parameters(f"{prefix}.global"))
                if site.gate is not None:
                    groups["gates"][f"{prefix}.gate.W"] = site.gate.weight
        return groups

    def adapter_parameters(self) -> dict[str, Tensor]:
        """Every adapter tensor by name, in forward order."""
        params: dict[str, Tensor] = {}
        for b, block in enumerate(self.sites):
            for name in PROJECTIONS:
                site = block[name]
                prefix = f"blocks.{b}.{name}"
                if isinstance(site, LoRAExpert):
                    params.update(site.parameters(f"{prefix}.lora"))
                else:
                    params.update(site.parameters(prefix))
        return params

    def parameters(self) -> dict[str, Tensor]:
        """Base and adapter tensors by name."""
        return {**self.base.parameters(), **self.adapter_parameters()}

    def set_trainable(self, groups: Iterable[str]) -> None:
        """Mark exactly the named adapter groups trainable.

        Raises:
            ConfigError: On an unknown group name.
        """
        groups = set(groups)
        unknown = groups - set(TRAINABLE_GROUPS)
        if unknown:
            raise ConfigError(f"unknown trainable groups {sorted(unknown)}")
        for group, params in self.parameter_groups().items():
            for param in params.values():
                param.requires_grad = group in groups
        self.base.freeze()

    def freeze_gates(self) -> None:
        for param in self.parameter_groups()["gates"].values():
            param.requires_grad = False

    @property
    def gates_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameter_groups()["gates"].values())

    def set_noise(self, sigma: float) -> None:
        for layer in self.gated_layers():
            layer.gate.noise_sigma = sigma

    # -- forward -------------------------------------------------------------

    def logits(self, tokens, ctx: Optional["RoutingContext"] = None) -> Tensor:
        """Causal logits of ``tokens``; MoE sites consult ``ctx`` for their decision.

        Raises:
            RoutingError: If an MoE site is reached without a routing context.
        """

        def project(b: int, name: str, x: Tensor, block_input: Tensor) -> Tensor:
            base_out = self.base.base_project(b, name, x, block_input)
            site = self.sites[b][name]
            if isinstance(site, LoRAExpert):
                return base_out + lora_delta(site, x)
            if ctx is None:
                raise RoutingError(f"{site.layer_id} is an MoE layer and no routing context was given")
            if ctx.is_token_level:
                return moe_forward_tokens(site, x, ctx.decide_tokens(b, site, x.shape[0]), base_out)
            go = ctx.decide(b, site, block_input)
            return moe_forward(site, x, go, base_out)

        if ctx is not None and ctx.is_token_level:
            ctx.observe_tokens(self.base.embed.data[check_tokens(self.base, tokens)])

        return run_transformer(self.base, tokens, project)

    def forward(self, instance, ctx: Optional["RoutingContext"]) -> Tensor:
        """Logits ``T x V`` of ``instance`` under the routing context built for it.

        Raises:
            RoutingError: If ``ctx`` is missing.
        """
        if ctx is None:
            raise RoutingError("forward needs a routing context built for the instance")
        return self.logits(instance.tokens, ctx)


def attach_adapters(
    base: BaseModel,
    placement: PlacementMap,
    cfg: AdapterConfig,
    rng: np.random.Generator,
) -> AdaptedModel:
    """Create adapters per ``placement`` around the frozen ``base``.

    Experts start with ``B = 0``; gates get small random weights. The base is
    frozen and otherwise left untouched, so one base can back several adapted
    models.

    Raises:
        ConfigError: If ``base`` already carries adapters or the placement is
            inconsistent.
    """
    if not isinstance(base, BaseModel):
        raise ConfigError(f"adapters can only be attached to a bare base model (attaching twice?), got {type(base).__name__}")
    placement.validate()
    base.freeze()
    dtype = base.dtype
    sites: list[dict[str, Adapter]] = []
    for b in range(base.config.n_layers):
        block: dict[str, Adapter] = {}
        for name in PROJECTIONS:
            d_out, d_in = projection_shape(name, base.config)
            kind = placement.kinds[name]
            if kind is AdapterKind.SINGLE_LORA:
                block[name] = LoRAExpert.init(d_in, d_out, cfg.rank, cfg.alpha, rng, dtype)
                continue
            experts = [LoRAExpert.init(d_in, d_out, cfg.rank, cfg.alpha, rng, dtype) for _ in range(cfg.n_experts)]
            global_expert = GlobalExpert.from_expert(LoRAExpert.init(d_in, d_out, cfg.rank, cfg.alpha, rng, dtype))
            gate = None
            if kind is AdapterKind.GATED_MOE:
                gate = GateLayer.init(
                    cfg.n_experts,
                    base.config.d_model,
                    rng,
                    dtype,
                    temperature=cfg.temperature,
                    noise_sigma=cfg.noise_sigma,
                    top_k=cfg.top_k,
                )
            block[name] = MoEAdapterLayer(experts, global_expert, gate, block=b, projection=name)
        for name, donor in placement.donors.items():
            bind_simplified(block[name], block[donor])
        sites.append(block)
    model = AdaptedModel(base, placement, cfg, sites)
    logger.debug("attached adapters: %d trainable parameters", count_trainable(model))
    return model


def count_trainable(m: Union[AdaptedModel, BaseModel]) -> int:
    """Number of scalars that currently require gradients."""
    return sum(p.size for p in m.parameters().values() if p.requires_grad)


def count_active(m: AdaptedModel) -> int:
    """Adapter scalars used for one instance: single LoRAs, the top-k experts and
    the global expert of every MoE site. Gates are not counted."""
    total = 0
    for block in m.sites:
        for site in block.values():
            if isinstance(site, LoRAExpert):
                total += site.n_params
            else:
                k = m.adapter_config.top_k
                total += k * site.experts[0].n_params + site.global_expert.n_params
    return total
