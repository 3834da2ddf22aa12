"""The three-stage training pipeline.

Stage I trains one LoRA per projection on the frozen base. Stage II swaps
the MoE sites for expert banks initialized from that LoRA and trains
experts, global experts and gates. Stage III freezes the gates and keeps
training the experts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from tqdm import tqdm

from awaker_moe.adapters import GateLayer, GlobalExpert, MoEAdapterLayer, balance_loss, bind_simplified
from awaker_moe.config import AdapterConfig, ModelConfig, RoutingConfig, StageConfig
from awaker_moe.errors import CheckpointError, ConfigError, InputError
from awaker_moe.model import (
    PROJECTIONS,
    AdaptedModel,
    AdapterKind,
    BaseModel,
    PlacementMap,
    attach_adapters,
    count_trainable,
)
from awaker_moe.routing import route_instance
from awaker_moe.tensor import (
    OptimizerState,
    Tensor,
    cross_entropy_masked,
    make_rng,
    no_grad,
    optimizer_step,
    rng_state,
    zero_grad,
)

from .checkpoint import Checkpoint
from .schedule import cosine_lr

logger = logging.getLogger(__name__)

BASE_STAGE = 0


@dataclass
class StageOutcome:
    """What one run of ``train_stage`` produced.

    Attributes:
        model: The trained model (parameters updated in place).
        optimizer: AdamW state after the last step.
        losses: Training loss of every step.
        initial_loss: Eval-mode loss of the first batch before training.
        final_loss: Eval-mode loss of the final batch after training.
        final_batch: Corpus indices of the final batch.
        rng_state: Generator states after training, by stream.
    """

    model: AdaptedModel
    optimizer: OptimizerState
    losses: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    final_batch: list[int] = field(default_factory=list)
    rng_state: dict = field(default_factory=dict)

    @property
    def metrics(self) -> dict:
        return {
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "final_batch": list(self.final_batch),
            "steps": len(self.losses),
        }


def instance_loss(model, inst, ctx=None) -> Tensor:
    """Masked next-token loss over the response span of ``inst``."""
    if isinstance(model, BaseModel):
        logits = model.forward(inst.tokens)
    else:
        logits = model.forward(inst, ctx)
    return cross_entropy_masked(logits[:-1], inst.targets, inst.loss_mask)


def batch_loss(
    model: AdaptedModel,
    batch: Sequence,
    routing: RoutingConfig,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> tuple[Tensor, list]:
    """Mean instance loss over ``batch`` and the gate outputs that produced it."""
    total = None
    outputs = []
    for inst in batch:
        ctx = route_instance(model, inst, routing.mode, train_mode, rng, routing.pooling)
        loss = instance_loss(model, inst, ctx)
        total = loss if total is None else total + loss
        outputs.extend(d.output for d in ctx.decisions(include_reused=False))
    return total * (1.0 / len(batch)), outputs


def eval_batch_loss(model: AdaptedModel, corpus: Sequence, indices: Sequence[int], routing: RoutingConfig) -> float:
    with no_grad():
        loss, _ = batch_loss(model, [corpus[i] for i in indices], routing)
    return loss.item()


def train_stage(
    model: AdaptedModel,
    corpus: Sequence,
    stage_cfg: StageConfig,
    routing: RoutingConfig,
    seed: int,
    balance_coef: float = 0.0,
    progress: bool = False,
) -> StageOutcome:
    """Train the groups named by ``stage_cfg.trainable`` for ``stage_cfg.steps`` steps.

    Batches are sampled with replacement from ``corpus``. Each instance is
    routed in train mode (gate noise on), the masked losses are averaged,
    and AdamW follows a cosine schedule. Everything outside the trainable
    groups, the base included, is left untouched.

    Raises:
        InputError: If ``corpus`` is empty.
    """
    if not corpus:
        raise InputError("training corpus is empty")
    stage = stage_cfg.stage
    model.set_trainable(stage_cfg.trainable)
    if stage_cfg.noise_sigma is not None:
        model.set_noise(stage_cfg.noise_sigma)
    run_seed = seed if stage_cfg.seed is None else stage_cfg.seed
    data_rng = make_rng(run_seed, "data", stage)
    noise_rng = make_rng(run_seed, "noise", stage)
    params = {name: p for name, p in model.adapter_parameters().items() if p.requires_grad}
    optimizer = OptimizerState(lr=stage_cfg.lr, weight_decay=stage_cfg.weight_decay)
    batch_size = stage_cfg.batch_size

    first_batch = [int(i) for i in data_rng.integers(0, len(corpus), size=batch_size)]
    outcome = StageOutcome(model=model, optimizer=optimizer, final_batch=first_batch)
    outcome.initial_loss = eval_batch_loss(model, corpus, first_batch, routing)
    logger.info(
        "stage %d: %d steps, lr=%g, %d trainable parameters, initial loss %.4f",
        stage,
        stage_cfg.steps,
        stage_cfg.lr,
        count_trainable(model),
        outcome.initial_loss,
    )

    batch = first_batch
    bar = tqdm(range(stage_cfg.steps), desc=f"stage {stage}", disable=not progress)
    for step in bar:
        if step > 0:
            batch = [int(i) for i in data_rng.integers(0, len(corpus), size=batch_size)]
        zero_grad(params)
        loss, outputs = batch_loss(model, [corpus[i] for i in batch], routing, True, noise_rng)
        if balance_coef > 0 and outputs:
            loss = loss + balance_loss(outputs) * balance_coef
        loss.backward()
        optimizer_step(optimizer, params, cosine_lr(step, stage_cfg.steps, stage_cfg.lr, stage_cfg.warmup))
        outcome.losses.append(loss.item())
        bar.set_postfix(loss=f"{outcome.losses[-1]:.4f}")
    zero_grad(params)

    outcome.final_batch = batch
    outcome.final_loss = eval_batch_loss(model, corpus, batch, routing)
    outcome.rng_state = {"data": rng_state(data_rng), "noise": rng_state(noise_rng)}
    logger.info("stage %d done: final loss %.4f", stage, outcome.final_loss)
    return outcome


def model_checkpoint(
    model: AdaptedModel,
    stage: int,
    seed: int,
    step: int = 0,
    trainable: Optional[Sequence[str]] = None,
    rng_state: Optional[dict] = None,
    metrics: Optional[dict] = None,
    optimizer: Optional[OptimizerState] = None,
) -> Checkpoint:
    """Snapshot the adapters of ``model`` as a stage checkpoint."""
    manifest = {
        "model": model.config.model_dump(),
        "adapters": model.adapter_config.model_dump(),
        "placement": model.placement.to_dict(),
        "stage": stage,
        "step": step,
        "seed": seed,
        "rng_state": rng_state or {},
        "metrics": metrics or {},
        "trainable": list(trainable or StageConfig.default_trainable(stage)),
    }
    return Checkpoint.from_state(manifest, model.adapter_parameters(), optimizer)


def stage_checkpoint(outcome: StageOutcome, stage_cfg: StageConfig, seed: int) -> Checkpoint:
    return model_checkpoint(
        outcome.model,
        stage_cfg.stage,
        seed,
        step=len(outcome.losses),
        trainable=stage_cfg.trainable,
        rng_state=outcome.rng_state,
        metrics=outcome.metrics,
        optimizer=outcome.optimizer,
    )


def base_checkpoint(base: BaseModel, seed: int, metrics: Optional[dict] = None) -> Checkpoint:
    manifest = {"model": base.config.model_dump(), "stage": BASE_STAGE, "step": 0, "seed": seed, "metrics": metrics or {}}
    return Checkpoint.from_state(manifest, base.parameters())


def load_base(ck: Checkpoint) -> BaseModel:
    """Frozen base stored in ``ck``.

    Raises:
        CheckpointError: If ``ck`` is not a base checkpoint or lacks tensors.
    """
    if ck.stage != BASE_STAGE:
        raise CheckpointError(f"expected a base checkpoint, got stage {ck.stage}")
    try:
        base = BaseModel.from_arrays(ModelConfig.model_validate(ck.manifest["model"]), ck.parameters())
    except KeyError as e:
        raise CheckpointError(f"base checkpoint lacks {e}") from e
    base.freeze()
    return base


def _check_model_config(base: BaseModel, ck: Checkpoint) -> None:
    if ck.manifest.get("model") != base.config.model_dump():
        raise ConfigError(f"checkpoint was trained on model {ck.manifest.get('model')}, base is {base.config.model_dump()}")


def load_adapted(base: BaseModel, ck: Checkpoint) -> AdaptedModel:
    """Rebuild the adapted model stored in a stage checkpoint around ``base``.

    Raises:
        ConfigError: If the checkpoint belongs to a different base shape.
        CheckpointError: If adapter tensors are missing or misshaped.
    """
    if ck.stage not in (1, 2, 3):
        raise CheckpointError(f"expected a stage checkpoint, got stage {ck.stage}")
    _check_model_config(base, ck)
    placement = PlacementMap.from_dict(ck.manifest["placement"])
    cfg = AdapterConfig.model_validate(ck.manifest["adapters"])
    model = attach_adapters(base, placement, cfg, make_rng(0, "init"))
    arrays = ck.parameters()
    params = model.adapter_parameters()
    if set(arrays) != set(params):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        raise CheckpointError(f"checkpoint tensors do not match the placement: missing {missing[:3]}, extra {extra[:3]}")
    for name, param in params.items():
        if arrays[name].shape != param.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape}, model expects {param.shape}")
        param.data = np.array(arrays[name], dtype=param.dtype, copy=True)
    model.set_trainable(ck.manifest.get("trainable") or StageConfig.default_trainable(ck.stage))
    return model


def run_stage1(
    base: BaseModel,
    corpus: Sequence,
    stage_cfg: StageConfig,
    adapters: AdapterConfig,
    routing: RoutingConfig,
    seed: int,
    progress: bool = False,
) -> Checkpoint:
    """Train a single LoRA on every projection of the frozen base.

    Raises:
        ConfigError: If ``stage_cfg`` is not a stage-1 config.
        InputError: If ``corpus`` is empty.
    """
    if stage_cfg.stage != 1:
        raise ConfigError(f"run_stage1 got a stage-{stage_cfg.stage} config")
    if not corpus:
        raise InputError("training corpus is empty")
    model = attach_adapters(base, PlacementMap.single_lora(), adapters, make_rng(seed, "init", 1))
    outcome = train_stage(model, corpus, stage_cfg, routing, seed, progress=progress)
    return stage_checkpoint(outcome, stage_cfg, seed)


def init_stage2_from_stage1(
    base: BaseModel,
    ck1: Checkpoint,
    n: Optional[int] = None,
    adapters: Optional[AdapterConfig] = None,
) -> AdaptedModel:
    """Build the MoE model whose experts all start as the stage-1 LoRA.

    At each MoE site the ``n`` experts and the global expert are copies of
    the stage-1 LoRA of that projection and the gate starts at zero. The
    q/k/v LoRAs are carried over. Because every expert is equal and the
    gate weights of the selected and global experts sum to one, the new
    model computes exactly what the stage-1 model did.

    Raises:
        ConfigError: If ``ck1`` is not a stage-1 checkpoint or disagrees with
            ``base`` or ``adapters``.
    """
    if ck1.stage != 1:
        raise ConfigError(f"stage 2 starts from a stage-1 checkpoint, got stage {ck1.stage}")
    stage1 = load_adapted(base, ck1)
    saved = AdapterConfig.model_validate(ck1.manifest["adapters"])
    cfg = adapters or saved
    if (cfg.rank, cfg.alpha) != (saved.rank, saved.alpha):
        raise ConfigError(f"adapter rank/alpha {cfg.rank}/{cfg.alpha} differ from stage 1 {saved.rank}/{saved.alpha}")
    if n is not None and n != cfg.n_experts:
        cfg = AdapterConfig.model_validate({**cfg.model_dump(), "n_experts": n})

    placement = PlacementMap.awaker()
    sites = []
    for b in range(base.config.n_layers):
        block = {}
        for name in PROJECTIONS:
            lora = stage1.lora(b, name)
            kind = placement.kinds[name]
            if kind is AdapterKind.SINGLE_LORA:
                block[name] = lora.copy()
                continue
            gate = None
            if kind is AdapterKind.GATED_MOE:
                gate = GateLayer.zeros(
                    cfg.n_experts,
                    base.config.d_model,
                    base.dtype,
                    temperature=cfg.temperature,
                    noise_sigma=cfg.noise_sigma,
                    top_k=cfg.top_k,
                )
            block[name] = MoEAdapterLayer(
                experts=[lora.copy() for _ in range(cfg.n_experts)],
                global_expert=GlobalExpert.from_expert(lora),
                gate=gate,
                block=b,
                projection=name,
            )
        for name, donor in placement.donors.items():
            bind_simplified(block[name], block[donor])
        sites.append(block)
    model = AdaptedModel(base, placement, cfg, sites)
    model.set_trainable(StageConfig.default_trainable(2))
    logger.info("initialized %d-expert MoE from stage 1 (%d trainable parameters)", cfg.n_experts, count_trainable(model))
    return model


def run_stage2(
    model: AdaptedModel,
    corpus: Sequence,
    stage_cfg: StageConfig,
    routing: RoutingConfig,
    seed: int,
    progress: bool = False,
) -> Checkpoint:
    """Train experts, global experts and gates.

    Raises:
        ConfigError: On a non-stage-2 config or a model without MoE layers.
    """
    if stage_cfg.stage != 2:
        raise ConfigError(f"run_stage2 got a stage-{stage_cfg.stage} config")
    if not model.has_moe:
        raise ConfigError("stage 2 needs an MoE model; build it with init_stage2_from_stage1")
    outcome = train_stage(model, corpus, stage_cfg, routing, seed, model.adapter_config.balance_coef, progress)
    return stage_checkpoint(outcome, stage_cfg, seed)


def run_stage3(
    model: AdaptedModel,
    corpus: Sequence,
    stage_cfg: StageConfig,
    routing: RoutingConfig,
    seed: int,
    progress: bool = False,
) -> Checkpoint:
    """Train experts and global experts with the gates frozen.

    Raises:
        ConfigError: On a non-stage-3 config, a model without MoE layers, or
            gates that are still trainable.
    """
    if stage_cfg.stage != 3:
        raise ConfigError(f"run_stage3 got a stage-{stage_cfg.stage} config")
    if not model.has_moe:
        raise ConfigError("stage 3 needs an MoE model")
    if not model.gates_frozen:
        raise ConfigError("stage 3 requires frozen gates; call freeze_gates() after stage 2")
    outcome = train_stage(model, corpus, stage_cfg, routing, seed, progress=progress)
    return stage_checkpoint(outcome, stage_cfg, seed)
