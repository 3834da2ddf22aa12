"""AdamW optimizer over named tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from awaker_moe.errors import ConfigError
from awaker_moe.tensor.core import Tensor


@dataclass
class OptimizerState:
    """Moment buffers and hyperparameters of an AdamW run.

    Attributes:
        lr: Base learning rate (the schedule scales it per step).
        betas: Decay rates of the first and second moments.
        eps: Denominator floor.
        weight_decay: Decoupled weight decay coefficient.
        step: Number of updates applied so far.
        m: First-moment buffers by parameter name.
        v: Second-moment buffers by parameter name.
    """

    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        """Scalar settings, as stored in checkpoint manifests."""
        return {
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step": self.step,
        }


def zero_grad(params: Mapping[str, Tensor]) -> None:
    """Drop accumulated gradients."""
    for param in params.values():
        param.grad = None


def optimizer_step(state: OptimizerState, params: Mapping[str, Tensor], lr: float) -> None:
    """Apply one AdamW update to every trainable parameter that has a gradient.

    Parameters with ``requires_grad=False`` are never read or written, and get
    no moment buffers.

    Raises:
        ConfigError: If ``lr`` is not positive.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    state.step += 1
    beta1, beta2 = state.betas
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name, param in params.items():
        if not param.requires_grad or param.grad is None:
            continue
        grad = param.grad
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        if state.weight_decay:
            param.data -= lr * state.weight_decay * param.data
        param.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
