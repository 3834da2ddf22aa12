"""Tensor core: dense arrays, reverse-mode autodiff and AdamW."""

from .core import (
    DEFAULT_DTYPE,
    GradTape,
    Tensor,
    concat,
    is_grad_enabled,
    matmul,
    no_grad,
    tensor,
)

from .functional import (
    cross_entropy_masked,
    embedding,
    rms_norm,
    rope,
    rope_tables,
    silu,
    softmax,
    softmax_row,
)

from .optim import OptimizerState, optimizer_step, zero_grad
from .rng import make_rng, restore_rng, rng_state

__all__ = [
    # Core
    "DEFAULT_DTYPE",
    "GradTape",
    "Tensor",
    "concat",
    "is_grad_enabled",
    "matmul",
    "no_grad",
    "tensor",
    # Functions
    "cross_entropy_masked",
    "embedding",
    "rms_norm",
    "rope",
    "rope_tables",
    "silu",
    "softmax",
    "softmax_row",
    # Optimizer
    "OptimizerState",
    "optimizer_step",
    "zero_grad",
    # Randomness
    "make_rng",
    "restore_rng",
    "rng_state",
]
