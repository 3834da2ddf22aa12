"""Instance-level routing.

One routing context is built per instance. In ``shared-embedding`` mode the
gate input is the pooled frozen embedding of the instruction span and the
same vector reaches every gate. In ``per-layer`` mode each gate pools the
residual stream entering its block over the instruction span instead. Either
way a gate decides once per instance and every token position shares it.

``token-level`` mode is kept for comparison only: each position is routed on
its own frozen token embedding, so one instance may be split across experts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from awaker_moe.adapters import GateOutput, MoEAdapterLayer, gate_forward
from awaker_moe.errors import ConfigError, InputError, RoutingError
from awaker_moe.tensor import Tensor

ROUTING_MODES = ("shared-embedding", "per-layer", "token-level")
INSTANCE_MODES = ("shared-embedding", "per-layer")
POOLINGS = ("mean", "last-token")


@dataclass(frozen=True)
class InstanceSegments:
    """Half-open token ranges of the instruction and the response.

    The instruction starts at position 0 and the response runs to the end of
    the instance. Whatever lies between them is the input span; the three
    ranges cover the instance without overlapping.
    """

    instruction: tuple[int, int]
    response: tuple[int, int]

    def __post_init__(self):
        i_start, i_end = self.instruction
        r_start, r_end = self.response
        if i_start != 0 or i_end <= i_start:
            raise InputError(f"instruction span {self.instruction} must start at 0 and be non-empty")
        if r_start < i_end or r_end < r_start:
            raise InputError(f"response span {self.response} must follow instruction span {self.instruction}")

    @classmethod
    def from_bounds(cls, length: int, instr_end: int, resp_start: int) -> "InstanceSegments":
        if not instr_end <= resp_start <= length:
            raise InputError(f"instr_end={instr_end}, resp_start={resp_start} do not fit {length} tokens in order")
        return cls(instruction=(0, instr_end), response=(resp_start, length))

    @property
    def input(self) -> tuple[int, int]:
        return self.instruction[1], self.response[0]

    @property
    def length(self) -> int:
        return self.response[1]


@dataclass
class RoutingDecision:
    """One logged gate consultation. ``reused`` marks a simplified layer
    taking its donor's output; ``position`` is set in token-level mode only."""

    block: int
    projection: str
    output: GateOutput
    reused: bool = False
    position: Optional[int] = None

    @property
    def layer_id(self) -> str:
        return f"blocks.{self.block}.{self.projection}"

    def to_dict(self) -> dict:
        entry = {
            "block": self.block,
            "projection": self.projection,
            "reused": self.reused,
            **self.output.to_dict(),
        }
        if self.position is not None:
            entry["position"] = self.position
        return entry


def _pool(rows, pooling: str):
    if pooling == "mean":
        return rows.mean(axis=0)
    return rows[-1]


@dataclass
class RoutingContext:
    """Per-instance routing state handed to the model's forward pass.

    Attributes:
        mode: ``shared-embedding``, ``per-layer`` or ``token-level``.
        segments: Instruction and response spans of the instance.
        gate_input: Shared gate input (shared-embedding mode only).
        train_mode: Whether gates add training noise.
        rng: Noise generator, needed in train mode.
        pooling: Reduction of the instruction span to one vector.
        token_inputs: Frozen embeddings of the sequence being run (token-level mode).
        log: Decisions in the order the gates were consulted.
    """

    mode: str
    segments: InstanceSegments
    gate_input: Optional[np.ndarray] = None
    train_mode: bool = False
    rng: Optional[np.random.Generator] = None
    pooling: str = "mean"
    token_inputs: Optional[np.ndarray] = field(default=None, repr=False)
    log: list[RoutingDecision] = field(default_factory=list)
    _cache: dict[tuple, GateOutput] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.mode not in ROUTING_MODES:
            raise ConfigError(f"unknown routing mode {self.mode!r}; expected one of {ROUTING_MODES}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"unknown pooling {self.pooling!r}; expected one of {POOLINGS}")
        if self.mode == "shared-embedding" and self.gate_input is None:
            raise RoutingError("shared-embedding routing needs a gate input")

    @property
    def is_token_level(self) -> bool:
        return self.mode == "token-level"

    def observe_tokens(self, embeddings: np.ndarray) -> None:
        """Record the frozen embeddings of the sequence about to run.

        Only token-level routing reads them. A longer sequence sharing the
        prefix keeps the decisions already made for earlier positions.
        """
        if self.is_token_level:
            self.token_inputs = np.asarray(embeddings)

    def decide(self, block: int, layer: MoEAdapterLayer, hidden: Optional[Tensor] = None) -> GateOutput:
        """Decision of ``layer`` for this instance, computed on first use.

        Raises:
            RoutingError: If ``layer`` is simplified and unbound, per-layer
                mode is asked to decide without the block input, or the
                context routes per token.
        """
        if self.is_token_level:
            raise RoutingError(f"{layer.layer_id}: token-level routing decides per position; use decide_tokens")
        key = (block, layer.projection)
        if key in self._cache:
            return self._cache[key]
        if layer.is_simplified:
            donor = self._donor(layer)
            go = self.decide(block, donor, hidden)
            self.log.append(RoutingDecision(block, layer.projection, go, reused=True))
        else:
            go = gate_forward(layer.gate, self._gate_input(layer, hidden), self.train_mode, self.rng)
            self.log.append(RoutingDecision(block, layer.projection, go))
        self._cache[key] = go
        return go

    def decide_tokens(self, block: int, layer: MoEAdapterLayer, length: int) -> list[GateOutput]:
        """Per-position decisions of ``layer`` for the first ``length`` positions.

        Raises:
            RoutingError: Outside token-level mode, before ``observe_tokens``,
                or for an unbound simplified layer.
        """
        if not self.is_token_level:
            raise RoutingError(f"{layer.layer_id}: {self.mode} routing decides once per instance")
        if self.token_inputs is None or len(self.token_inputs) < length:
            raise RoutingError(f"{layer.layer_id}: token-level routing has no embeddings for {length} positions")
        outputs = []
        for t in range(length):
            key = (block, layer.projection, t)
            if key not in self._cache:
                if layer.is_simplified:
                    go = self.decide_tokens(block, self._donor(layer), t + 1)[t]
                    self.log.append(RoutingDecision(block, layer.projection, go, reused=True, position=t))
                else:
                    go = gate_forward(layer.gate, Tensor(self.token_inputs[t]), self.train_mode, self.rng)
                    self.log.append(RoutingDecision(block, layer.projection, go, position=t))
                self._cache[key] = go
            outputs.append(self._cache[key])
        return outputs

    def _donor(self, layer: MoEAdapterLayer) -> MoEAdapterLayer:
        if layer.donor is None:
            raise RoutingError(f"simplified MoE layer {layer.layer_id} is not bound to a gated donor")
        return layer.donor

    def _gate_input(self, layer: MoEAdapterLayer, hidden: Optional[Tensor]) -> Tensor:
        if self.mode == "shared-embedding":
            return Tensor(self.gate_input)
        if hidden is None:
            raise RoutingError(f"per-layer routing of {layer.layer_id} needs the block input")
        start, end = self.segments.instruction
        return _pool(hidden[start:end], self.pooling)

    def decisions(self, include_reused: bool = True) -> list[RoutingDecision]:
        return [d for d in self.log if include_reused or not d.reused]


def build_gate_input(m, inst, pooling: str = "mean") -> np.ndarray:
    """Pool the frozen token embeddings of the instruction span into one vector.

    Input and response tokens never enter the result.

    Raises:
        InputError: If the instruction span is empty.
    """
    start, end = inst.segments.instruction
    if end <= start:
        raise InputError("cannot build a gate input from an empty instruction")
    base = getattr(m, "base", m)
    ids = np.asarray(inst.tokens[start:end], dtype=np.int64)
    rows = base.embed.data[ids]
    return np.array(_pool(rows, pooling), copy=True)


def route_instance(
    m,
    inst,
    mode: str = "shared-embedding",
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
    pooling: str = "mean",
) -> RoutingContext:
    """Build the routing context of ``inst`` and make every gate decide.

    In shared-embedding mode the gates are consulted directly. In per-layer
    and token-level mode one forward pass runs to produce what the gates
    read. A model without MoE layers gets a context with an empty log.

    Raises:
        ConfigError: On an unknown mode.
    """
    if mode not in ROUTING_MODES:
        raise ConfigError(f"unknown routing mode {mode!r}; expected one of {ROUTING_MODES}")
    gate_input = build_gate_input(m, inst, pooling) if mode == "shared-embedding" else None
    ctx = RoutingContext(
        mode=mode,
        segments=inst.segments,
        gate_input=gate_input,
        train_mode=train_mode,
        rng=rng,
        pooling=pooling,
    )
    if not m.has_moe:
        return ctx
    if mode == "shared-embedding":
        for layer in m.moe_layers():
            ctx.decide(layer.block, layer)
    else:
        m.logits(inst.tokens, ctx)
    return ctx
