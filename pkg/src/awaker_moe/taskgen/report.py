"""Report schemas written by ``eval``, ``inspect-routing`` and ``compare``."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator

from awaker_moe.routing import RoutingStats

MI_SLACK = 1e-9


class RoutingStatsReport(BaseModel):
    """Routing statistics as written to JSON."""

    utilization: list[int]
    entropy_bits: float = Field(ge=0)
    mutual_information_bits: float = Field(ge=0)
    n_instances: int = Field(ge=1)
    n_events: int = Field(ge=1)
    reference: dict
    joint: list[list[int]]
    tasks: list[int]
    per_layer_utilization: dict[str, list[int]] = Field(default_factory=dict)
    flip_rate: Optional[float] = Field(None, ge=0, le=1)
    token_flip_rate: Optional[float] = Field(None, ge=0, le=1)

    @model_validator(mode="after")
    def _within_bounds(self) -> "RoutingStatsReport":
        if sum(self.utilization) != self.n_events:
            raise ValueError(f"utilization sums to {sum(self.utilization)}, expected {self.n_events} events")
        n_tasks = max(len(self.tasks), 1)
        n_experts = max(len(self.utilization), 1)
        ceiling = min(math.log2(n_tasks), math.log2(n_experts))
        if self.mutual_information_bits > ceiling + MI_SLACK:
            raise ValueError(f"mutual information {self.mutual_information_bits} exceeds its ceiling {ceiling}")
        return self

    @classmethod
    def from_stats(cls, stats: RoutingStats) -> "RoutingStatsReport":
        return cls.model_validate(stats.to_dict())


class ArmResult(BaseModel):
    """Scores and sizes of one benchmark arm."""

    arm: Literal["lora", "moe"]
    per_task_accuracy: dict[str, float]
    mean_accuracy: float = Field(ge=0, le=1)
    trainable_params: int = Field(ge=0)
    active_params: int = Field(ge=0)
    rank: int = Field(ge=1)
    steps: int = Field(ge=0)
    final_loss: float

    @model_validator(mode="after")
    def _accuracies_in_range(self) -> "ArmResult":
        for task, acc in self.per_task_accuracy.items():
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy of {task} is {acc}")
        return self


class SeedResult(BaseModel):
    """Both arms on one seed."""

    seed: int
    lora: ArmResult
    moe: ArmResult
    margin: float
    routing: RoutingStatsReport

    @property
    def moe_won(self) -> bool:
        return self.margin > 0


class EvalReport(BaseModel):
    """Outcome of the conflict benchmark.

    Attributes:
        seeds: Per-seed arm results.
        mean_margin: Mean over seeds of MoE minus LoRA mean accuracy.
        moe_wins: Seeds on which the MoE arm scored higher.
        param_tolerance: Allowed relative gap between the arms' active counts.
        config: Echo of the run configuration.
    """

    seeds: list[SeedResult]
    mean_margin: float
    moe_wins: int = Field(ge=0)
    param_tolerance: float = Field(ge=0)
    config: dict

    @model_validator(mode="after")
    def _arms_matched(self) -> "EvalReport":
        for result in self.seeds:
            target = result.moe.active_params
            gap = abs(result.lora.trainable_params - target)
            if gap > self.param_tolerance * target:
                raise ValueError(
                    f"seed {result.seed}: arms differ by {gap} parameters "
                    f"({result.lora.trainable_params} vs {target})"
                )
        if self.moe_wins > len(self.seeds):
            raise ValueError("more wins than seeds")
        return self


class EvalSummary(BaseModel):
    """Accuracy of one trained checkpoint on the test split."""

    stage: int
    seed: int
    routing_mode: str
    per_task_accuracy: dict[str, float]
    mean_accuracy: float = Field(ge=0, le=1)
    trainable_params: int = Field(ge=0)
    active_params: int = Field(ge=0)
    n_instances: int = Field(ge=1)


def write_report(report: BaseModel, path: Path) -> Path:
    """Write ``report`` as indented JSON with sorted keys."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
