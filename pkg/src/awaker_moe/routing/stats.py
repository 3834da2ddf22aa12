"""Routing statistics: expert utilization, entropy, task/expert mutual
information and the flip rate between two routing runs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from awaker_moe.errors import InputError

from .context import RoutingDecision

DEFAULT_REFERENCE = (0, "mlp_gate")

DecisionLog = Sequence[RoutingDecision]


def entropy_bits(counts) -> float:
    """Shannon entropy (bits) of the empirical distribution ``counts``."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise InputError("entropy of an empty histogram")
    p = counts[counts > 0] / total
    return float(-(p * np.log2(p)).sum())


def mutual_information(joint) -> float:
    """Plug-in mutual information (bits) of a contingency table of counts."""
    joint = np.asarray(joint, dtype=np.float64)
    if joint.ndim != 2:
        raise InputError(f"mutual information needs a 2-D table, got shape {joint.shape}")
    total = joint.sum()
    if total <= 0:
        raise InputError("mutual information of an empty table")
    p = joint / total
    rows = p.sum(axis=1, keepdims=True)
    cols = p.sum(axis=0, keepdims=True)
    nz = p > 0
    value = float((p[nz] * np.log2(p[nz] / (rows @ cols)[nz])).sum())
    return max(value, 0.0)


@dataclass
class RoutingStats:
    """Summary of logged routing decisions.

    Attributes:
        utilization: Times each expert was chosen, over all gated events.
        entropy_bits: Entropy of ``utilization``.
        mutual_information_bits: I(task; expert) at the reference layer.
        n_instances: Number of instance logs summarized.
        n_events: Gated (non-reused) decisions counted.
        reference: ``(block, projection)`` used for the mutual information.
        joint: Task by expert counts at the reference layer.
        tasks: Task labels, in the row order of ``joint``.
        per_layer_utilization: Expert counts per gated layer.
        flip_rate: Fraction of decisions that changed between shared-embedding
            and per-layer routing.
        token_flip_rate: Fraction of token-level decisions that differ from
            the shared-embedding decision of their layer.
    """

    utilization: list[int]
    entropy_bits: float
    mutual_information_bits: float
    n_instances: int
    n_events: int
    reference: tuple[int, str] = DEFAULT_REFERENCE
    joint: list[list[int]] = field(default_factory=list)
    tasks: list[int] = field(default_factory=list)
    per_layer_utilization: dict[str, list[int]] = field(default_factory=dict)
    flip_rate: Optional[float] = None
    token_flip_rate: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "utilization": list(self.utilization),
            "entropy_bits": self.entropy_bits,
            "mutual_information_bits": self.mutual_information_bits,
            "n_instances": self.n_instances,
            "n_events": self.n_events,
            "reference": {"block": self.reference[0], "projection": self.reference[1]},
            "joint": [list(row) for row in self.joint],
            "tasks": list(self.tasks),
            "per_layer_utilization": {k: list(v) for k, v in self.per_layer_utilization.items()},
            "flip_rate": self.flip_rate,
            "token_flip_rate": self.token_flip_rate,
        }


def routing_stats(
    logs: Sequence[DecisionLog],
    task_labels: Sequence[int],
    reference: tuple[int, str] = DEFAULT_REFERENCE,
) -> RoutingStats:
    """Summarize one decision log per instance.

    Reused entries of simplified layers are skipped so that each
    (instance, gated layer) pair counts once.

    Raises:
        InputError: If there are no logs, labels and logs disagree in number,
            nothing was routed, or the reference layer never decided.
    """
    if not logs:
        raise InputError("routing_stats needs at least one logged instance")
    if len(logs) != len(task_labels):
        raise InputError(f"{len(logs)} logs but {len(task_labels)} task labels")
    n_experts = 0
    for log in logs:
        for d in log:
            n_experts = max(n_experts, len(d.output.probs))
    if n_experts == 0:
        raise InputError("the logs hold no routing decisions (model without MoE layers?)")

    utilization = np.zeros(n_experts, dtype=np.int64)
    per_layer: dict[str, np.ndarray] = {}
    tasks = sorted(set(int(t) for t in task_labels))
    joint = np.zeros((len(tasks), n_experts), dtype=np.int64)
    n_events = 0
    for log, task in zip(logs, task_labels):
        for d in log:
            if d.reused:
                continue
            expert = d.output.expert
            utilization[expert] += 1
            per_layer.setdefault(d.layer_id, np.zeros(n_experts, dtype=np.int64))[expert] += 1
            n_events += 1
            if (d.block, d.projection) == tuple(reference):
                joint[tasks.index(int(task)), expert] += 1
    if joint.sum() == 0:
        raise InputError(f"reference layer blocks.{reference[0]}.{reference[1]} made no decision")

    return RoutingStats(
        utilization=utilization.tolist(),
        entropy_bits=entropy_bits(utilization),
        mutual_information_bits=mutual_information(joint),
        n_instances=len(logs),
        n_events=n_events,
        reference=(int(reference[0]), str(reference[1])),
        joint=joint.tolist(),
        tasks=tasks,
        per_layer_utilization={k: v.tolist() for k, v in sorted(per_layer.items())},
    )


def _events(log: DecisionLog) -> dict[tuple[int, str], dict[Optional[int], tuple[int, ...]]]:
    events: dict[tuple[int, str], dict[Optional[int], tuple[int, ...]]] = {}
    for d in log:
        if not d.reused:
            events.setdefault((d.block, d.projection), {})[d.position] = d.output.selected
    return events


def _aligned(a: dict, b: dict, where: str) -> list[tuple]:
    if a.keys() == b.keys():
        return [(a[p], b[p]) for p in a]
    # an instance-level decision stands for every position
    if list(a) == [None]:
        return [(a[None], b[p]) for p in b]
    if list(b) == [None]:
        return [(a[p], b[None]) for p in a]
    raise InputError(f"{where}: logs route different positions")


def flip_rate(log_a: Sequence[DecisionLog], log_b: Sequence[DecisionLog]) -> float:
    """Fraction of (instance, gated layer) decisions whose expert choice differs.

    Token-level logs are compared position by position; against an
    instance-level log each token decision is compared with the decision
    of its layer.

    Raises:
        InputError: If the two runs do not cover the same instances, layers
            and positions.
    """
    if len(log_a) != len(log_b):
        raise InputError(f"logs cover {len(log_a)} and {len(log_b)} instances")
    flips = total = 0
    for i, (a, b) in enumerate(zip(log_a, log_b)):
        events_a, events_b = _events(a), _events(b)
        if events_a.keys() != events_b.keys():
            raise InputError(f"instance {i}: logs cover different layers")
        for key, by_position in events_a.items():
            for left, right in _aligned(by_position, events_b[key], f"instance {i}"):
                total += 1
                flips += left != right
    if total == 0:
        raise InputError("flip_rate needs at least one routed decision")
    return flips / total
