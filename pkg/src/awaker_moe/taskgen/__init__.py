"""Synthetic multi-task corpus, evaluation and the conflict benchmark."""

from .tasks import (
    DIGITS,
    SEP,
    SPLITS,
    TRANSFORMS,
    InstanceRecord,
    TaskInstance,
    TaskSpec,
    default_task_specs,
    gen_corpus,
    read_corpus,
    read_jsonl,
    write_corpus,
    write_jsonl,
)

from .evaluate import (
    collect_routing_logs,
    eval_accuracy,
    greedy_decode,
    is_exact_match,
    mean_accuracy,
)

from .report import (
    ArmResult,
    EvalReport,
    EvalSummary,
    RoutingStatsReport,
    SeedResult,
    write_report,
)

from .benchmark import (
    PipelineResult,
    lora_params_per_rank,
    matched_lora_rank,
    run_conflict_benchmark,
    run_moe_pipeline,
    run_seed,
)

__all__ = [
    # Tasks and corpus
    "DIGITS",
    "SEP",
    "SPLITS",
    "TRANSFORMS",
    "InstanceRecord",
    "TaskInstance",
    "TaskSpec",
    "default_task_specs",
    "gen_corpus",
    "read_corpus",
    "read_jsonl",
    "write_corpus",
    "write_jsonl",
    # Evaluation
    "collect_routing_logs",
    "eval_accuracy",
    "greedy_decode",
    "is_exact_match",
    "mean_accuracy",
    # Reports
    "ArmResult",
    "EvalReport",
    "EvalSummary",
    "RoutingStatsReport",
    "SeedResult",
    "write_report",
    # Benchmark
    "PipelineResult",
    "lora_params_per_rank",
    "matched_lora_rank",
    "run_conflict_benchmark",
    "run_moe_pipeline",
    "run_seed",
]
