"""Low-rank adapters.

A LoRA expert adds ``(alpha / r) * B A x`` to a frozen projection. ``A`` starts
as Gaussian noise and ``B`` as zeros, so a fresh expert contributes nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from awaker_moe.errors import ConfigError, ShapeError
from awaker_moe.tensor import DEFAULT_DTYPE, Tensor


@dataclass
class LoRAExpert:
    """One low-rank delta for a ``d_out x d_in`` projection.

    Attributes:
        A: ``r x d_in`` down projection.
        B: ``d_out x r`` up projection.
        alpha: Scale numerator; the delta is multiplied by ``alpha / r``.
    """

    A: Tensor
    B: Tensor
    alpha: float

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[0] != self.B.shape[1]:
            raise ShapeError(f"LoRA factors disagree: A {self.A.shape}, B {self.B.shape}")
        if not self.alpha > 0:
            raise ConfigError(f"LoRA alpha must be positive, got {self.alpha}")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def n_params(self) -> int:
        return self.A.size + self.B.size

    @classmethod
    def init(
        cls,
        d_in: int,
        d_out: int,
        rank: int,
        alpha: float,
        rng: np.random.Generator,
        dtype=DEFAULT_DTYPE,
    ) -> "LoRAExpert":
        """Create an expert with ``A ~ N(0, 1/d_in)`` and ``B = 0``."""
        if rank < 1:
            raise ConfigError(f"LoRA rank must be at least 1, got {rank}")
        a = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(rank, d_in)).astype(dtype)
        b = np.zeros((d_out, rank), dtype=dtype)
        return cls(Tensor(a, requires_grad=True), Tensor(b, requires_grad=True), alpha)

    def copy(self) -> "LoRAExpert":
        """Deep copy with fresh buffers and the same trainable flags."""
        return type(self)(
            Tensor(self.A.data.copy(), requires_grad=self.A.requires_grad),
            Tensor(self.B.data.copy(), requires_grad=self.B.requires_grad),
            self.alpha,
        )

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.A": self.A, f"{prefix}.B": self.B}

    def set_trainable(self, flag: bool) -> None:
        self.A.requires_grad = flag
        self.B.requires_grad = flag


class GlobalExpert(LoRAExpert):
    """The always-active expert of an MoE layer."""

    @classmethod
    def from_expert(cls, expert: LoRAExpert) -> "GlobalExpert":
        clone = expert.copy()
        return cls(clone.A, clone.B, clone.alpha)


def lora_delta(e: LoRAExpert, x: Tensor) -> Tensor:
    """Apply ``e`` to every position of ``x`` (``... x d_in`` -> ``... x d_out``).

    Raises:
        ShapeError: If the trailing dimension of ``x`` is not ``d_in``.
    """
    if x.shape[-1] != e.d_in:
        raise ShapeError(f"lora_delta expects trailing dimension {e.d_in}, got input {x.shape}")
    return ((x @ e.A.T) @ e.B.T) * e.scaling
