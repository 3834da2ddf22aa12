"""Three-stage training pipeline, base pretraining and checkpoints."""

from .checkpoint import FORMAT_VERSION, MAGIC, Checkpoint, parameter_checksums
from .pretrain import pretrain_base, pretrain_sequence
from .schedule import cosine_lr

from .stages import (
    BASE_STAGE,
    StageOutcome,
    base_checkpoint,
    batch_loss,
    eval_batch_loss,
    init_stage2_from_stage1,
    instance_loss,
    load_adapted,
    load_base,
    model_checkpoint,
    run_stage1,
    run_stage2,
    run_stage3,
    stage_checkpoint,
    train_stage,
)

__all__ = [
    # Checkpoints
    "FORMAT_VERSION",
    "MAGIC",
    "Checkpoint",
    "parameter_checksums",
    "base_checkpoint",
    "stage_checkpoint",
    "model_checkpoint",
    "load_adapted",
    "load_base",
    # Schedule and losses
    "cosine_lr",
    "batch_loss",
    "eval_batch_loss",
    "instance_loss",
    # Stages
    "BASE_STAGE",
    "StageOutcome",
    "init_stage2_from_stage1",
    "run_stage1",
    "run_stage2",
    "run_stage3",
    "train_stage",
    # Base pretraining
    "pretrain_base",
    "pretrain_sequence",
]
