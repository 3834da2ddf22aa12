"""Conflict benchmark: the staged MoE pipeline against a parameter-matched LoRA.

Both arms see the same mixed corpus, base, seed and step budget. The LoRA
arm's rank is chosen so that its trainable count matches the MoE arm's
active per-instance count.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from awaker_moe.config import AdapterConfig, ModelConfig, RunConfig, StageConfig
from awaker_moe.errors import ConfigError
from awaker_moe.model import PROJECTIONS, AdaptedModel, BaseModel, count_active, count_trainable, projection_shape
from awaker_moe.routing import flip_rate, routing_stats
from awaker_moe.training import (
    Checkpoint,
    init_stage2_from_stage1,
    load_adapted,
    pretrain_base,
    run_stage1,
    run_stage2,
    run_stage3,
)

from .evaluate import collect_routing_logs, eval_accuracy, mean_accuracy
from .report import ArmResult, EvalReport, RoutingStatsReport, SeedResult
from .tasks import TaskInstance, TaskSpec, default_task_specs, gen_corpus

logger = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    """The model after stage 3 and the checkpoint of every stage."""

    model: AdaptedModel
    checkpoints: list[Checkpoint]


def run_moe_pipeline(
    base: BaseModel,
    train: Sequence[TaskInstance],
    config: RunConfig,
    seed: int,
    progress: bool = False,
) -> PipelineResult:
    """Stages 1, 2 and 3 back to back, freezing the gates before stage 3."""
    ck1 = run_stage1(base, train, config.stage(1), config.adapters, config.routing, seed, progress)
    model = init_stage2_from_stage1(base, ck1, config.adapters.n_experts, config.adapters)
    ck2 = run_stage2(model, train, config.stage(2), config.routing, seed, progress)
    model.freeze_gates()
    ck3 = run_stage3(model, train, config.stage(3), config.routing, seed, progress)
    return PipelineResult(model, [ck1, ck2, ck3])


def lora_params_per_rank(model_cfg: ModelConfig) -> int:
    """Trainable scalars per unit of rank for one LoRA on every projection."""
    per_block = sum(sum(projection_shape(name, model_cfg)) for name in PROJECTIONS)
    return per_block * model_cfg.n_layers


def matched_lora_rank(model_cfg: ModelConfig, target: int, tolerance: float) -> int:
    """Rank whose all-projection LoRA count is closest to ``target``.

    Raises:
        ConfigError: If no rank lands within ``tolerance`` of ``target``.
    """
    per_rank = lora_params_per_rank(model_cfg)
    rank = max(1, int(round(target / per_rank)))
    count = rank * per_rank
    if abs(count - target) > tolerance * target:
        raise ConfigError(f"single-LoRA arm has {count} parameters at rank {rank}, MoE arm uses {target} per instance")
    return rank


def _named(per_task: dict[int, float], specs: Sequence[TaskSpec]) -> dict[str, float]:
    names = {spec.task_id: spec.name for spec in specs}
    return {names.get(task, str(task)): acc for task, acc in per_task.items()}


def _step_budget(config: RunConfig) -> int:
    total = sum(stage.steps for stage in config.stages)
    if total > config.benchmark.max_total_steps:
        raise ConfigError(f"stage budgets add up to {total} steps, above max_total_steps={config.benchmark.max_total_steps}")
    return total


def run_seed(
    config: RunConfig,
    seed: int,
    progress: bool = False,
    corpus: Optional[dict[str, list[TaskInstance]]] = None,
    base: Optional[BaseModel] = None,
) -> SeedResult:
    """Train and score both arms for one seed."""
    specs = default_task_specs(config.tasks.names, config.tasks.input_len)
    if corpus is None:
        sizes = {
            "train": config.tasks.train_per_task,
            "val": config.tasks.val_per_task,
            "test": config.tasks.test_per_task,
        }
        corpus = gen_corpus(specs, sizes, seed)
    if base is None:
        base = pretrain_base(config.model, config.pretrain, seed, progress)
    total_steps = _step_budget(config)
    workers = config.benchmark.eval_workers
    test = corpus["test"]

    pipeline = run_moe_pipeline(base, corpus["train"], config, seed, progress)
    moe = pipeline.model
    moe_active = count_active(moe)
    moe_acc = eval_accuracy(moe, test, config.routing, workers)
    moe_result = ArmResult(
        arm="moe",
        per_task_accuracy=_named(moe_acc, specs),
        mean_accuracy=mean_accuracy(moe_acc),
        trainable_params=count_trainable(moe),
        active_params=moe_active,
        rank=config.adapters.rank,
        steps=total_steps,
        final_loss=pipeline.checkpoints[-1].manifest["metrics"]["final_loss"],
    )

    rank = matched_lora_rank(config.model, moe_active, config.benchmark.param_tolerance)
    lora_adapters = AdapterConfig.model_validate(
        {**config.adapters.model_dump(), "n_experts": 1, "top_k": 1, "rank": rank, "alpha": 2.0 * rank}
    )
    first = config.stage(1)
    lora_stage = StageConfig(
        stage=1,
        lr=first.lr,
        steps=total_steps,
        warmup=first.warmup,
        batch_size=first.batch_size,
        weight_decay=first.weight_decay,
    )
    lora_ck = run_stage1(base, corpus["train"], lora_stage, lora_adapters, config.routing, seed, progress)
    lora = load_adapted(base, lora_ck)
    lora_trainable = count_trainable(lora)
    if abs(lora_trainable - moe_active) > config.benchmark.param_tolerance * moe_active:
        raise ConfigError(f"single-LoRA arm trains {lora_trainable} parameters, MoE arm uses {moe_active} per instance")
    lora_acc = eval_accuracy(lora, test, config.routing, workers)
    lora_result = ArmResult(
        arm="lora",
        per_task_accuracy=_named(lora_acc, specs),
        mean_accuracy=mean_accuracy(lora_acc),
        trainable_params=lora_trainable,
        active_params=count_active(lora),
        rank=rank,
        steps=total_steps,
        final_loss=lora_ck.manifest["metrics"]["final_loss"],
    )

    labels = [inst.task for inst in test]
    shared_logs = collect_routing_logs(moe, test, config.routing, "shared-embedding")
    layer_logs = collect_routing_logs(moe, test, config.routing, "per-layer")
    token_logs = collect_routing_logs(moe, test, config.routing, "token-level")
    primary = {"shared-embedding": shared_logs, "per-layer": layer_logs, "token-level": token_logs}[config.routing.mode]
    reference = (config.routing.reference_block, config.routing.reference_projection)
    stats = routing_stats(primary, labels, reference)
    stats.flip_rate = flip_rate(shared_logs, layer_logs)
    stats.token_flip_rate = flip_rate(shared_logs, token_logs)

    margin = moe_result.mean_accuracy - lora_result.mean_accuracy
    logger.info(
        "seed %d: moe %.3f vs lora %.3f (margin %+.3f), MI %.3f bits",
        seed,
        moe_result.mean_accuracy,
        lora_result.mean_accuracy,
        margin,
        stats.mutual_information_bits,
    )
    return SeedResult(
        seed=seed,
        lora=lora_result,
        moe=moe_result,
        margin=margin,
        routing=RoutingStatsReport.from_stats(stats),
    )


def run_conflict_benchmark(config: RunConfig, progress: bool = False) -> EvalReport:
    """Run every seed of ``config.benchmark.seeds`` and summarize."""
    if not config.benchmark.seeds:
        raise ConfigError("the benchmark needs at least one seed")
    results = [run_seed(config, seed, progress) for seed in config.benchmark.seeds]
    return EvalReport(
        seeds=results,
        mean_margin=float(np.mean([r.margin for r in results])),
        moe_wins=sum(r.moe_won for r in results),
        param_tolerance=config.benchmark.param_tolerance,
        config=config.model_dump(mode="json"),
    )
