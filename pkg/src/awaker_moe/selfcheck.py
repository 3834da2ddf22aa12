"""Invariant suite behind ``awaker-moe selfcheck``.

Each check builds what it needs at small dimensions, asserts one property
of the gate algebra, the adapted model, routing or checkpoints, and raises
``InvariantError`` naming the property when it does not hold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from awaker_moe.adapters import GateLayer, gate_forward
from awaker_moe.config import AdapterConfig, ModelConfig, RoutingConfig
from awaker_moe.errors import CheckpointError, InvariantError
from awaker_moe.model import AdaptedModel, BaseModel, PlacementMap, attach_adapters
from awaker_moe.routing import route_instance
from awaker_moe.taskgen import TaskInstance, default_task_specs
from awaker_moe.tensor import Tensor, make_rng, no_grad
from awaker_moe.training import (
    Checkpoint,
    init_stage2_from_stage1,
    instance_loss,
    load_adapted,
    model_checkpoint,
)

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
FD_TOLERANCE = 1e-4


def small_model_config(n_layers: int = 1) -> ModelConfig:
    """A model small enough for finite differences."""
    return ModelConfig(vocab_size=32, d_model=16, n_layers=n_layers, n_heads=2, d_ff=32, max_len=32)


def small_adapter_config(n_experts: int = 4) -> AdapterConfig:
    return AdapterConfig(n_experts=n_experts, rank=4, alpha=8.0, noise_sigma=0.0)


def randomize_adapters(model: AdaptedModel, rng: np.random.Generator, scale: float = 0.1) -> None:
    """Give every B matrix and gate non-zero values so that all paths carry gradient."""
    for name, param in model.adapter_parameters().items():
        if name.endswith(".B") or name.endswith(".gate.W"):
            param.data = rng.normal(0.0, scale if name.endswith(".B") else 1.0, size=param.shape)


def sample_instances(n: int, rng: np.random.Generator) -> list[TaskInstance]:
    specs = default_task_specs()
    return [specs[int(rng.integers(len(specs)))].sample(rng) for _ in range(n)]


def routed_loss(model: AdaptedModel, inst: TaskInstance, routing: Optional[RoutingConfig] = None) -> Tensor:
    """Eval-mode loss of ``inst`` with a freshly built routing context."""
    routing = routing or RoutingConfig()
    ctx = route_instance(model, inst, routing.mode, False, None, routing.pooling)
    return instance_loss(model, inst, ctx)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)


def gradient_check(
    model: AdaptedModel,
    inst: TaskInstance,
    names: Iterable[str],
    rng: np.random.Generator,
    coords: int = 3,
    step: float = FD_STEP,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``coords`` random entries of every named parameter are perturbed.
    """
    params = model.parameters()
    for p in params.values():
        p.grad = None
    routed_loss(model, inst).backward()
    worst = 0.0
    for name in names:
        param = params[name]
        analytic = np.zeros_like(param.data) if param.grad is None else param.grad
        for flat in rng.choice(param.size, size=min(coords, param.size), replace=False):
            index = np.unravel_index(int(flat), param.shape)
            original = param.data[index]
            with no_grad():
                param.data[index] = original + step
                plus = routed_loss(model, inst).item()
                param.data[index] = original - step
                minus = routed_loss(model, inst).item()
            param.data[index] = original
            worst = max(worst, relative_error(float(analytic[index]), (plus - minus) / (2 * step)))
    return worst


@dataclass
class CheckResult:
    name: str
    detail: str


def _require(condition: bool, name: str, message: str) -> None:
    if not condition:
        raise InvariantError(f"{name}: {message}")


def check_gate_algebra(seed: int, draws: int = 1000) -> str:
    rng = make_rng(seed, "init", 1)
    worst = 0.0
    for _ in range(draws):
        n, d = int(rng.integers(1, 7)), int(rng.integers(1, 9))
        gate = GateLayer(Tensor(rng.normal(size=(n, d))), temperature=float(rng.uniform(0.1, 10.0)), noise_sigma=0.0)
        x = rng.normal(size=d)
        go = gate_forward(gate, Tensor(x))
        _require(float(go.g_global.data) == 1.0 - float(go.g_max.data), "gate algebra", "G_global != 1 - G_max")
        total = float(go.g_experts.data.sum()) + float(go.g_global.data)
        worst = max(worst, abs(total - 1.0))
        nonzero = int((go.g_experts.data != 0).sum())
        _require(nonzero == 1, "gate algebra", f"{nonzero} experts carry weight with k=1")
        scaled = gate_forward(gate, Tensor(x * float(rng.uniform(0.01, 100.0))))
        _require(scaled.selected == go.selected, "gate algebra", "argmax changed under positive scaling")
    _require(worst <= 1e-12, "gate algebra", f"selected weight + global deviates from 1 by {worst:.3e}")
    return f"{draws} draws, max |sum - 1| = {worst:.1e}"


def check_zero_init(seed: int, instances: int = 50) -> str:
    rng = make_rng(seed, "init", 2)
    base = BaseModel.init(small_model_config(2), rng)
    model = attach_adapters(base, PlacementMap.awaker(), small_adapter_config(), rng)
    worst = 0.0
    with no_grad():
        for inst in sample_instances(instances, rng):
            ctx = route_instance(model, inst)
            diff = np.abs(model.forward(inst, ctx).data - base.forward(inst.tokens).data).max()
            worst = max(worst, float(diff))
    _require(worst <= 1e-12, "zero-init no-op", f"adapted logits differ from base by {worst:.3e}")
    return f"{instances} instances, max diff {worst:.1e}"


def check_stage2_equivalence(seed: int, instances: int = 50) -> str:
    rng = make_rng(seed, "init", 3)
    base = BaseModel.init(small_model_config(2), rng)
    stage1 = attach_adapters(base, PlacementMap.single_lora(), small_adapter_config(), rng)
    randomize_adapters(stage1, rng)
    moe = init_stage2_from_stage1(base, model_checkpoint(stage1, 1, seed))
    worst = 0.0
    with no_grad():
        for inst in sample_instances(instances, rng):
            a = stage1.forward(inst, route_instance(stage1, inst)).data
            b = moe.forward(inst, route_instance(moe, inst)).data
            worst = max(worst, float(np.abs(a - b).max()))
    _require(worst <= 1e-10, "stage-2 init equivalence", f"logits differ from stage 1 by {worst:.3e}")
    return f"{instances} instances, max diff {worst:.1e}"


def routed_gradient_names(model: AdaptedModel, ctx) -> list[str]:
    """Every adapter tensor that carries gradient for a routed instance.

    Experts of MoE layers are included only when the layer's decision
    selected them; unselected experts get no gradient.
    """
    selected = {(d.block, d.projection): set(d.output.selected) for d in ctx.log}
    names = []
    for name in model.adapter_parameters():
        parts = name.split(".")
        if parts[3] == "experts" and int(parts[4]) not in selected[(int(parts[1]), parts[2])]:
            continue
        names.append(name)
    return names


def check_gradients(seed: int, seeds: int = 20, coords: int = 4) -> str:
    worst = 0.0
    checked = 0
    for s in range(seeds):
        rng = make_rng(seed + s, "init", 4)
        base = BaseModel.init(small_model_config(1), rng)
        model = attach_adapters(base, PlacementMap.awaker(), small_adapter_config(), rng)
        randomize_adapters(model, rng)
        model.set_trainable(["lora", "experts", "global", "gates"])
        inst = sample_instances(1, rng)[0]
        names = routed_gradient_names(model, route_instance(model, inst))
        worst = max(worst, gradient_check(model, inst, names, rng, coords=coords))
        checked += len(names)
    _require(worst <= FD_TOLERANCE, "gradient check", f"relative error {worst:.3e} above {FD_TOLERANCE}")
    return f"{seeds} models, {checked} tensors, max relative error {worst:.1e}"


def check_instruction_only_routing(seed: int, pairs: int = 200) -> str:
    rng = make_rng(seed, "init", 5)
    base = BaseModel.init(small_model_config(2), rng)
    model = attach_adapters(base, PlacementMap.awaker(), small_adapter_config(), rng)
    randomize_adapters(model, rng)
    with no_grad():
        for inst in sample_instances(pairs, rng):
            other = inst.with_response(rng.integers(0, 10, size=len(inst.response)))
            for mode in ("shared-embedding", "per-layer"):
                a, b = route_instance(model, inst, mode).log, route_instance(model, other, mode).log
                _require(len(a) == len(b), "instruction-only routing", "logs differ in length")
                for da, db in zip(a, b):
                    if mode == "shared-embedding":
                        same = da.output.same_decision(db.output)
                    else:
                        # block inputs come from differently sized matmuls
                        same = da.output.selected == db.output.selected and np.allclose(
                            da.output.g_experts.data, db.output.g_experts.data, rtol=0.0, atol=1e-12
                        )
                    _require(same, "instruction-only routing", f"{da.layer_id} decision depends on the response ({mode})")
    return f"{pairs} response-perturbed pairs, both routing modes"


def check_shared_gate(seed: int, instances: int = 20) -> str:
    rng = make_rng(seed, "init", 6)
    base = BaseModel.init(small_model_config(2), rng)
    model = attach_adapters(base, PlacementMap.awaker(), small_adapter_config(), rng)
    randomize_adapters(model, rng)
    events = 0
    with no_grad():
        for inst in sample_instances(instances, rng):
            log = route_instance(model, inst).log
            by_layer = {(d.block, d.projection): d for d in log}
            _require(len(by_layer) == len(log), "shared gate", "a layer decided twice for one instance")
            for b in range(model.n_blocks):
                donor = by_layer[(b, "mlp_gate")].output
                for name in ("mlp_up", "mlp_down"):
                    entry = by_layer[(b, name)]
                    _require(entry.reused and entry.output is donor, "shared gate", f"blocks.{b}.{name} did not reuse mlp_gate")
                    events += 1
    return f"{events} reused decisions match mlp_gate"


def check_checkpoint(seed: int) -> str:
    rng = make_rng(seed, "init", 7)
    base = BaseModel.init(small_model_config(1), rng)
    model = attach_adapters(base, PlacementMap.single_lora(), small_adapter_config(), rng)
    randomize_adapters(model, rng)
    first = model_checkpoint(model, 1, seed).to_bytes()
    again = Checkpoint.from_bytes(first)
    _require(again.to_bytes() == first, "checkpoint round-trip", "save -> load -> save changed bytes")
    restored = load_adapted(base, again)
    for name, param in model.adapter_parameters().items():
        _require(
            np.array_equal(param.data, restored.adapter_parameters()[name].data),
            "checkpoint round-trip",
            f"{name} changed on reload",
        )
    corrupt = bytearray(first)
    corrupt[-1] ^= 0xFF
    try:
        Checkpoint.from_bytes(bytes(corrupt))
    except CheckpointError:
        return f"{len(first)} bytes round-trip, corruption detected"
    raise InvariantError("checkpoint corruption: flipped payload byte went unnoticed")


CHECKS: list[tuple[str, Callable[[int], str]]] = [
    ("gate algebra", check_gate_algebra),
    ("zero-init no-op", check_zero_init),
    ("stage-2 init equivalence", check_stage2_equivalence),
    ("gradient check", check_gradients),
    ("instruction-only routing", check_instruction_only_routing),
    ("shared gate", check_shared_gate),
    ("checkpoint round-trip", check_checkpoint),
]


def run_selfcheck(seed: int = 0) -> list[CheckResult]:
    """Run every check in order.

    Raises:
        InvariantError: At the first property that does not hold.
    """
    results = []
    for name, check in CHECKS:
        detail = check(seed)
        logger.info("selfcheck %s: %s", name, detail)
        results.append(CheckResult(name, detail))
    return results
