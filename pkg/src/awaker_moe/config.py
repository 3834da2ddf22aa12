"""Run configuration for awaker-moe.

Configuration is a tree of pydantic models. ``RunConfig.toy()`` is the
desk-scale default, ``RunConfig.paper()`` records the published
hyperparameters. A JSON file passed with ``--config`` is merged over the
chosen profile.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from awaker_moe.errors import ConfigError

SEED_ENV_VAR = "AWAKER_SEED"

TRAINABLE_GROUPS = ("lora", "experts", "global", "gates")


class ModelConfig(BaseModel):
    """Shape of the frozen decoder-only base."""

    model_config = ConfigDict(extra="forbid")

    vocab_size: int = Field(32, ge=2)
    d_model: int = Field(64, ge=2)
    n_layers: int = Field(2, ge=1)
    n_heads: int = Field(4, ge=1)
    d_ff: int = Field(128, ge=1)
    max_len: int = Field(32, ge=2)
    rope_theta: float = Field(10000.0, gt=0)
    norm_eps: float = Field(1e-6, gt=0)
    dtype: Literal["float64", "float32"] = "float64"

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary encoding")
        return self


class PretrainConfig(BaseModel):
    """One-off language-model pretraining of the base before any stage."""

    model_config = ConfigDict(extra="forbid")

    steps: int = Field(400, ge=0)
    lr: float = Field(3e-3, gt=0)
    warmup: int = Field(20, ge=0)
    batch_size: int = Field(8, ge=1)
    seq_len: int = Field(24, ge=4)


class AdapterConfig(BaseModel):
    """Experts, global expert and gate hyperparameters.

    Attributes:
        n_experts: Routed experts per MoE layer (the global expert is extra).
        rank: LoRA rank r.
        alpha: LoRA scale alpha; deltas are multiplied by alpha / rank.
        temperature: Gate softmax temperature tau.
        noise_sigma: Standard deviation of the training-time logit noise.
        top_k: Experts activated per instance.
        balance_coef: Weight of the load-balancing auxiliary loss (0 = off).
    """

    model_config = ConfigDict(extra="forbid")

    n_experts: int = Field(4, ge=1)
    rank: int = Field(8, ge=1)
    alpha: float = Field(16.0, gt=0)
    temperature: float = Field(1.0, gt=0)
    noise_sigma: float = Field(0.01, ge=0)
    top_k: int = Field(1, ge=1)
    balance_coef: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _k_within_n(self) -> "AdapterConfig":
        if self.top_k > self.n_experts:
            raise ValueError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")
        return self

    @classmethod
    def toy(cls) -> "AdapterConfig":
        """Desk-scale experts with the published alpha / rank ratio and a light balance loss."""
        return cls(n_experts=4, rank=8, alpha=16.0, balance_coef=0.1)

    @classmethod
    def paper(cls) -> "AdapterConfig":
        """Published expert hyperparameters: four experts, r=256, alpha=512."""
        return cls(n_experts=4, rank=256, alpha=512.0)


class RoutingConfig(BaseModel):
    """How gate inputs are built and where statistics are read."""

    model_config = ConfigDict(extra="forbid")

    mode: Literal["shared-embedding", "per-layer", "token-level"] = "shared-embedding"
    pooling: Literal["mean", "last-token"] = "mean"
    reference_block: int = Field(0, ge=0)
    reference_projection: Literal["o", "mlp_gate"] = "mlp_gate"


class StageConfig(BaseModel):
    """One stage of the training pipeline.

    Attributes:
        stage: 1 (single LoRA), 2 (MoE with gates) or 3 (experts only).
        lr: Peak learning rate of the cosine schedule.
        steps: Number of optimizer steps.
        warmup: Linear warmup steps.
        batch_size: Instances per step.
        trainable: Parameter groups updated in this stage.
        noise_sigma: Overrides the adapters' gate noise when set.
        seed: Overrides the run seed for this stage when set.
        weight_decay: Decoupled AdamW weight decay.
    """

    model_config = ConfigDict(extra="forbid")

    stage: Literal[1, 2, 3]
    lr: float = Field(1e-3, gt=0)
    steps: int = Field(300, ge=0)
    warmup: int = Field(20, ge=0)
    batch_size: int = Field(4, ge=1)
    trainable: list[str] = Field(default_factory=list)
    noise_sigma: Optional[float] = Field(None, ge=0)
    seed: Optional[int] = None
    weight_decay: float = Field(0.0, ge=0)

    @field_validator("trainable")
    @classmethod
    def _known_groups(cls, value: list[str]) -> list[str]:
        unknown = sorted(set(value) - set(TRAINABLE_GROUPS))
        if unknown:
            raise ValueError(f"unknown trainable groups {unknown}; expected a subset of {TRAINABLE_GROUPS}")
        return sorted(set(value), key=TRAINABLE_GROUPS.index)

    @model_validator(mode="after")
    def _stage_contract(self) -> "StageConfig":
        if not self.trainable:
            self.trainable = list(self.default_trainable(self.stage))
        groups = set(self.trainable)
        if self.stage == 1 and groups != {"lora"}:
            raise ValueError("stage 1 trains the single LoRA only")
        if self.stage == 2 and not {"experts", "global", "gates"} <= groups:
            raise ValueError("stage 2 trains all experts, the global expert and the gates")
        if self.stage == 3 and ("gates" in groups or not {"experts", "global"} <= groups):
            raise ValueError("stage 3 trains experts and the global expert with gates frozen")
        return self

    @staticmethod
    def default_trainable(stage: int) -> tuple[str, ...]:
        if stage == 1:
            return ("lora",)
        if stage == 2:
            return ("lora", "experts", "global", "gates")
        return ("lora", "experts", "global")

    @classmethod
    def toy(cls, stage: int) -> "StageConfig":
        """Desk-scale defaults: 300 / 600 / 300 steps at 3e-3 / 3e-3 / 1.5e-3."""
        lr = {1: 3e-3, 2: 3e-3, 3: 1.5e-3}[stage]
        steps = {1: 300, 2: 600, 3: 300}[stage]
        return cls(stage=stage, lr=lr, steps=steps, warmup=20, batch_size=4)

    @classmethod
    def paper(cls, stage: int) -> "StageConfig":
        """Published learning rates: 1e-5 / 1e-5 / 5e-6, batch size 4."""
        lr = {1: 1e-5, 2: 1e-5, 3: 5e-6}[stage]
        steps = {1: 300, 2: 600, 3: 300}[stage]
        return cls(stage=stage, lr=lr, steps=steps, warmup=20, batch_size=4)


class TaskConfig(BaseModel):
    """Synthetic multi-task corpus."""

    model_config = ConfigDict(extra="forbid")

    names: list[Literal["copy", "reverse", "increment", "sort"]] = Field(
        default_factory=lambda: ["copy", "reverse", "increment", "sort"]
    )
    input_len: tuple[int, int] = (3, 6)
    train_per_task: int = Field(2000, ge=1)
    val_per_task: int = Field(100, ge=0)
    test_per_task: int = Field(400, ge=1)

    @model_validator(mode="after")
    def _valid(self) -> "TaskConfig":
        if len(self.names) < 2:
            raise ValueError("the corpus needs at least two tasks")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate task names in {self.names}")
        lo, hi = self.input_len
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid input length range {self.input_len}")
        return self


class BenchmarkConfig(BaseModel):
    """Conflict benchmark: MoE pipeline against a parameter-matched LoRA."""

    model_config = ConfigDict(extra="forbid")

    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])
    param_tolerance: float = Field(0.05, ge=0)
    eval_workers: int = Field(1, ge=1)
    max_total_steps: int = Field(1200, ge=1)


class RunConfig(BaseModel):
    """Root configuration, one JSON object with a section per concern."""

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    profile: Literal["toy", "paper"] = "toy"
    model: ModelConfig = Field(default_factory=ModelConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    adapters: AdapterConfig = Field(default_factory=AdapterConfig.toy)
    routing: RoutingConfig = Field(default_factory=RoutingConfig)
    stages: list[StageConfig] = Field(default_factory=lambda: [StageConfig.toy(s) for s in (1, 2, 3)])
    tasks: TaskConfig = Field(default_factory=TaskConfig)
    benchmark: BenchmarkConfig = Field(default_factory=BenchmarkConfig)

    @model_validator(mode="after")
    def _three_stages(self) -> "RunConfig":
        if [s.stage for s in self.stages] != [1, 2, 3]:
            raise ValueError("stages must list stage 1, 2 and 3 in order")
        return self

    def stage(self, stage_id: int) -> StageConfig:
        return self.stages[stage_id - 1]

    @classmethod
    def toy(cls) -> "RunConfig":
        return cls()

    @classmethod
    def paper(cls) -> "RunConfig":
        return cls(
            profile="paper",
            adapters=AdapterConfig.paper(),
            stages=[StageConfig.paper(s) for s in (1, 2, 3)],
        )

    @classmethod
    def for_profile(cls, profile: str) -> "RunConfig":
        if profile == "toy":
            return cls.toy()
        if profile == "paper":
            return cls.paper()
        raise ConfigError(f"unknown profile {profile!r}; expected 'toy' or 'paper'")


def _deep_merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(
    path: Optional[Path] = None,
    profile: Optional[str] = None,
    seed: Optional[int] = None,
) -> RunConfig:
    """Build the run configuration.

    The profile preset is the starting point; the JSON file at ``path`` is
    merged over it. The seed comes from ``seed`` if given, else from the
    ``AWAKER_SEED`` environment variable, else from the file or preset.

    Raises:
        ConfigError: If the file is unreadable or the result does not validate.
    """
    overrides: dict[str, Any] = {}
    if path is not None:
        try:
            overrides = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(overrides, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    chosen = profile or overrides.get("profile", "toy")
    preset = RunConfig.for_profile(chosen).model_dump()
    if "stages" in overrides and isinstance(overrides["stages"], list):
        # Stage entries merge positionally over the preset stages.
        stages = overrides.pop("stages")
        merged_stages = [
            _deep_merge(preset["stages"][i], entry) if i < len(preset["stages"]) else entry
            for i, entry in enumerate(stages)
        ]
        preset["stages"] = merged_stages
    data = _deep_merge(preset, overrides)
    data["profile"] = chosen

    env_seed = os.environ.get(SEED_ENV_VAR)
    if seed is not None:
        data["seed"] = seed
    elif env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV_VAR}={env_seed!r} is not an integer") from e

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
