#!/usr/bin/env python3
"""Prototype script for watching the gates specialize.

Trains a tiny model through the three stages on a small corpus and prints,
for a few test instances of every task, which expert each gated layer picks
and with what weight. Nothing is written to disk.

Usage:
    python scripts/routing_demo.py
    python scripts/routing_demo.py --per-layer
    python scripts/routing_demo.py --steps 40 --seed 3
"""

import argparse
import sys
from pathlib import Path

# Add src to path for development
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))


def build_config(steps: int, seed: int, mode: str):
    """Tiny run configuration for a quick look at routing.

    Args:
        steps: Optimizer steps per stage.
        seed: Run seed.
        mode: Routing mode.
    """
    from awaker_moe.config import RunConfig

    cfg = RunConfig.toy().model_dump()
    cfg["seed"] = seed
    cfg["model"].update(d_model=32, n_layers=1, n_heads=2, d_ff=64)
    cfg["pretrain"].update(steps=50, batch_size=4, seq_len=16)
    cfg["adapters"].update(rank=4, alpha=8.0)
    cfg["routing"]["mode"] = mode
    for stage in cfg["stages"]:
        stage.update(steps=steps, warmup=min(5, steps), lr=5e-3)
    cfg["tasks"].update(train_per_task=50, val_per_task=0, test_per_task=3)
    return RunConfig.model_validate(cfg)


def print_routing(model, instances, specs, config) -> None:
    """Print one line per gated decision of each instance."""
    from awaker_moe.routing import route_instance

    names = {spec.task_id: spec.name for spec in specs}
    for inst in sorted(instances, key=lambda i: i.task):
        ctx = route_instance(model, inst.prompt_only(), config.routing.mode, pooling=config.routing.pooling)
        picks = ", ".join(
            f"{d.layer_id}->{d.output.expert} ({float(d.output.g_max.data):.2f})"
            for d in ctx.decisions(include_reused=False)
        )
        print(f"  {names[inst.task]:<10} {picks}")


def main():
    parser = argparse.ArgumentParser(
        description="Train a tiny MoE-LoRA model and print its routing decisions",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--steps", type=int, default=20, help="Steps per stage (default: 20)")
    parser.add_argument("--seed", type=int, default=0, help="Run seed (default: 0)")
    parser.add_argument("--per-layer", action="store_true", help="Route from block inputs instead of embeddings")
    args = parser.parse_args()

    from awaker_moe.taskgen import default_task_specs, gen_corpus, mean_accuracy, eval_accuracy, run_moe_pipeline
    from awaker_moe.training import pretrain_base

    config = build_config(args.steps, args.seed, "per-layer" if args.per_layer else "shared-embedding")
    specs = default_task_specs(config.tasks.names, config.tasks.input_len)
    corpus = gen_corpus(specs, {"train": config.tasks.train_per_task, "test": config.tasks.test_per_task}, config.seed)

    print(f"Pretraining a d={config.model.d_model} base...")
    base = pretrain_base(config.model, config.pretrain, config.seed, progress=True)
    print(f"Running stages 1-3 with {args.steps} steps each ({config.routing.mode} routing)...")
    result = run_moe_pipeline(base, corpus["train"], config, config.seed, progress=True)

    print("\nRouting on test instances (layer->expert (G_max)):")
    print("-" * 60)
    print_routing(result.model, corpus["test"], specs, config)

    accuracy = eval_accuracy(result.model, corpus["test"], config.routing)
    print(f"\nExact-match accuracy on {len(corpus['test'])} instances: {mean_accuracy(accuracy):.3f}")


if __name__ == "__main__":
    main()
