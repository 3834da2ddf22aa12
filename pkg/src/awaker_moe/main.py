"""Main entry point for awaker-moe.

This module provides the command line for generating the corpus, running
the training stages, evaluating checkpoints, inspecting routing and running
the conflict benchmark.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

from awaker_moe.config import RunConfig, load_run_config
from awaker_moe.errors import AwakerError, ConfigError, InputError

logger = logging.getLogger(__name__)

DEFAULT_OUT = "runs/default"


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config merged over the profile preset")
    common.add_argument("--seed", type=int, help="Run seed (overrides AWAKER_SEED and the config file)")
    common.add_argument("--profile", choices=["toy", "paper"], help="Hyperparameter preset (default: toy)")
    common.add_argument("--out", type=Path, default=Path(DEFAULT_OUT), help="Directory for corpus, checkpoints and reports")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="awaker-moe",
        description="Awaker-MoE: instance-routed mixture of LoRA experts on a frozen toy transformer",
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    subparsers.add_parser("gen-data", parents=[common], help="Generate the multi-task corpus")

    train_parser = subparsers.add_parser("train", parents=[common], help="Run one training stage")
    train_parser.add_argument("--stage", type=int, choices=[1, 2, 3], required=True, help="Stage to run")

    eval_parser = subparsers.add_parser("eval", parents=[common], help="Exact-match accuracy on the test split")
    eval_parser.add_argument("--stage", type=int, choices=[1, 2, 3], help="Checkpoint to score (default: latest)")

    routing_parser = subparsers.add_parser("inspect-routing", parents=[common], help="Routing statistics on the test split")
    routing_parser.add_argument("--stage", type=int, choices=[2, 3], help="Checkpoint to inspect (default: latest)")

    subparsers.add_parser("compare", parents=[common], help="MoE pipeline vs parameter-matched single LoRA")
    subparsers.add_parser("selfcheck", parents=[common], help="Run the invariant suite")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """Run the command line and return the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_help()
        return 2

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_run_config(args.config, args.profile, args.seed)
        if args.command == "gen-data":
            run_gen_data(config, args.out)
        elif args.command == "train":
            run_train(config, args.out, args.stage)
        elif args.command == "eval":
            run_eval(config, args.out, args.stage)
        elif args.command == "inspect-routing":
            run_inspect_routing(config, args.out, args.stage)
        elif args.command == "compare":
            run_compare(config, args.out)
        elif args.command == "selfcheck":
            run_selfcheck_command(config)
    except AwakerError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


def run():
    """Console-script entry point."""
    sys.exit(main())


# -- helpers ------------------------------------------------------------------


def _checkpoint_path(out: Path, stage: int) -> Path:
    return out / f"stage{stage}.awck"


def _load_base(config: RunConfig, out: Path, create: bool = False):
    """Load ``base.awck``, pretraining and saving it first when ``create`` is set."""
    from awaker_moe.training import Checkpoint, base_checkpoint, load_base, pretrain_base

    path = out / "base.awck"
    if path.exists():
        base = load_base(Checkpoint.load(path))
        if base.config != config.model:
            raise ConfigError(f"{path} was built for {base.config.model_dump()}, config asks for {config.model.model_dump()}")
        return base
    if not create:
        raise ConfigError(f"{path} not found; run 'train --stage 1' first")
    print("Pretraining the base model...")
    base = pretrain_base(config.model, config.pretrain, config.seed, progress=True)
    base_checkpoint(base, config.seed).save(path)
    return base


def _load_split(out: Path, split: str):
    from awaker_moe.taskgen import read_jsonl

    path = out / "corpus" / f"{split}.jsonl"
    if not path.exists():
        raise InputError(f"{path} not found; run 'gen-data' first")
    instances = read_jsonl(path)
    if not instances:
        raise InputError(f"{path} is empty")
    return instances


def _latest_stage(out: Path, allowed=(3, 2, 1)) -> int:
    for stage in allowed:
        if _checkpoint_path(out, stage).exists():
            return stage
    raise ConfigError(f"no stage checkpoint in {out}; run 'train' first")


def _load_model(config: RunConfig, out: Path, stage: Optional[int], allowed=(3, 2, 1)):
    from awaker_moe.training import Checkpoint, load_adapted

    stage = stage or _latest_stage(out, allowed)
    path = _checkpoint_path(out, stage)
    if not path.exists():
        raise ConfigError(f"{path} not found; run 'train --stage {stage}' first")
    base = _load_base(config, out)
    return stage, load_adapted(base, Checkpoint.load(path))


# -- commands -----------------------------------------------------------------


def run_gen_data(config: RunConfig, out: Path):
    """Generate the corpus and write it as JSONL."""
    from awaker_moe.taskgen import default_task_specs, gen_corpus, write_corpus

    specs = default_task_specs(config.tasks.names, config.tasks.input_len)
    sizes = {
        "train": config.tasks.train_per_task,
        "val": config.tasks.val_per_task,
        "test": config.tasks.test_per_task,
    }
    corpus = gen_corpus(specs, sizes, config.seed)
    paths = write_corpus(corpus, out / "corpus")
    for split, path in paths.items():
        print(f"  {split}: {len(corpus[split])} instances -> {path}")
    print(f"\nGenerated {len(specs)} tasks with seed {config.seed}.")


def run_train(config: RunConfig, out: Path, stage: int):
    """Run one stage; stages 2 and 3 continue from the previous checkpoint."""
    from awaker_moe.training import Checkpoint, init_stage2_from_stage1, load_adapted, run_stage1, run_stage2, run_stage3

    train = _load_split(out, "train")
    stage_cfg = config.stage(stage)
    if stage == 1:
        base = _load_base(config, out, create=True)
        ck = run_stage1(base, train, stage_cfg, config.adapters, config.routing, config.seed, progress=True)
    else:
        previous = _checkpoint_path(out, stage - 1)
        if not previous.exists():
            raise ConfigError(f"stage {stage} needs {previous}; run 'train --stage {stage - 1}' first")
        base = _load_base(config, out)
        ck_prev = Checkpoint.load(previous)
        if stage == 2:
            model = init_stage2_from_stage1(base, ck_prev, config.adapters.n_experts, config.adapters)
            ck = run_stage2(model, train, stage_cfg, config.routing, config.seed, progress=True)
        else:
            model = load_adapted(base, ck_prev)
            model.freeze_gates()
            ck = run_stage3(model, train, stage_cfg, config.routing, config.seed, progress=True)
    path = ck.save(_checkpoint_path(out, stage))
    metrics = ck.manifest["metrics"]
    print(f"Stage {stage}: loss {metrics['initial_loss']:.4f} -> {metrics['final_loss']:.4f} over {metrics['steps']} steps")
    print(f"Saved {path}")


def run_eval(config: RunConfig, out: Path, stage: Optional[int]):
    """Score a checkpoint on the test split and write ``eval.json``."""
    from awaker_moe.model import count_active, count_trainable
    from awaker_moe.taskgen import EvalSummary, default_task_specs, eval_accuracy, mean_accuracy, write_report

    stage, model = _load_model(config, out, stage)
    test = _load_split(out, "test")
    per_task = eval_accuracy(model, test, config.routing, config.benchmark.eval_workers)
    names = {spec.task_id: spec.name for spec in default_task_specs(config.tasks.names, config.tasks.input_len)}
    summary = EvalSummary(
        stage=stage,
        seed=config.seed,
        routing_mode=config.routing.mode,
        per_task_accuracy={names.get(t, str(t)): acc for t, acc in per_task.items()},
        mean_accuracy=mean_accuracy(per_task),
        trainable_params=count_trainable(model),
        active_params=count_active(model),
        n_instances=len(test),
    )
    path = write_report(summary, out / "eval.json")
    print(f"Stage {stage} accuracy on {len(test)} test instances:")
    for task, acc in summary.per_task_accuracy.items():
        print(f"  {task}: {acc:.3f}")
    print(f"  mean: {summary.mean_accuracy:.3f}")
    print(f"Wrote {path}")


def run_inspect_routing(config: RunConfig, out: Path, stage: Optional[int]):
    """Routing statistics of an MoE checkpoint; writes ``routing.json``."""
    from awaker_moe.routing import flip_rate, routing_stats
    from awaker_moe.taskgen import RoutingStatsReport, collect_routing_logs, write_report

    stage, model = _load_model(config, out, stage, allowed=(3, 2))
    if not model.has_moe:
        raise ConfigError(f"stage {stage} checkpoint has no MoE layers to inspect")
    test = _load_split(out, "test")
    shared = collect_routing_logs(model, test, config.routing, "shared-embedding")
    per_layer = collect_routing_logs(model, test, config.routing, "per-layer")
    tokens = collect_routing_logs(model, test, config.routing, "token-level")
    logs = {"shared-embedding": shared, "per-layer": per_layer, "token-level": tokens}[config.routing.mode]
    reference = (config.routing.reference_block, config.routing.reference_projection)
    stats = routing_stats(logs, [inst.task for inst in test], reference)
    stats.flip_rate = flip_rate(shared, per_layer)
    stats.token_flip_rate = flip_rate(shared, tokens)
    path = write_report(RoutingStatsReport.from_stats(stats), out / "routing.json")
    print(f"Routing of stage {stage} over {stats.n_instances} instances ({stats.n_events} gated decisions):")
    print(f"  utilization: {stats.utilization}")
    print(f"  entropy: {stats.entropy_bits:.3f} bits")
    print(f"  I(task; expert) at blocks.{reference[0]}.{reference[1]}: {stats.mutual_information_bits:.3f} bits")
    print(f"  flip rate shared vs per-layer: {stats.flip_rate:.3f}")
    print(f"  flip rate shared vs token-level: {stats.token_flip_rate:.3f}")
    print(f"Wrote {path}")


def run_compare(config: RunConfig, out: Path):
    """Run the conflict benchmark and write ``report.json``."""
    from awaker_moe.taskgen import run_conflict_benchmark, write_report

    report = run_conflict_benchmark(config, progress=True)
    path = write_report(report, out / "report.json")
    for result in report.seeds:
        print(
            f"  seed {result.seed}: moe {result.moe.mean_accuracy:.3f} vs lora {result.lora.mean_accuracy:.3f} "
            f"(margin {result.margin:+.3f}, MI {result.routing.mutual_information_bits:.2f} bits)"
        )
    print(f"\nMoE won {report.moe_wins} of {len(report.seeds)} seeds, mean margin {report.mean_margin:+.3f}")
    print(f"Wrote {path}")


def run_selfcheck_command(config: RunConfig):
    """Run the invariant suite; failures surface as InvariantError (exit 3)."""
    from awaker_moe.selfcheck import run_selfcheck

    for result in run_selfcheck(config.seed):
        print(f"  ok  {result.name}: {result.detail}")
    print("\nAll invariants hold.")


if __name__ == "__main__":
    run()
