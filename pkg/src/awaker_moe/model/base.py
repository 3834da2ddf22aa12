"""Frozen decoder-only transformer.

Qwen2-shaped blocks: RMS pre-norms, rotary attention with q/k/v/o
projections, and a SwiGLU MLP with gate/up/down projections. Every
projection is called through a hook so that adapters can wrap it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from awaker_moe.config import ModelConfig
from awaker_moe.errors import InputError
from awaker_moe.tensor import (
    Tensor,
    concat,
    embedding,
    rms_norm,
    rope,
    rope_tables,
    silu,
    softmax,
)

PROJECTIONS = ("q", "k", "v", "o", "mlp_gate", "mlp_up", "mlp_down")

ATTENTION_PROJECTIONS = ("q", "k", "v", "o")

MASK_VALUE = -1e30

# (block index, projection name, projection input, residual stream at block entry)
ProjectFn = Callable[[int, str, Tensor, Tensor], Tensor]


def projection_shape(name: str, cfg: ModelConfig) -> tuple[int, int]:
    """``(d_out, d_in)`` of a named projection."""
    if name in ATTENTION_PROJECTIONS:
        return cfg.d_model, cfg.d_model
    if name in ("mlp_gate", "mlp_up"):
        return cfg.d_ff, cfg.d_model
    if name == "mlp_down":
        return cfg.d_model, cfg.d_ff
    raise KeyError(f"unknown projection {name!r}")


@dataclass
class Block:
    """Weights of one transformer block; projections are ``d_out x d_in``."""

    attn_norm: Tensor
    mlp_norm: Tensor
    weights: dict[str, Tensor]


class BaseModel:
    """The frozen language model that adapters are attached to."""

    def __init__(
        self,
        config: ModelConfig,
        embed: Tensor,
        blocks: list[Block],
        final_norm: Tensor,
        lm_head: Tensor,
    ):
        self.config = config
        self.embed = embed
        self.blocks = blocks
        self.final_norm = final_norm
        self.lm_head = lm_head
        self.cos, self.sin = rope_tables(
            config.max_len, config.d_model // config.n_heads, config.rope_theta, embed.dtype
        )
        self._mask = np.triu(np.full((config.max_len, config.max_len), MASK_VALUE, dtype=embed.dtype), k=1)

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "BaseModel":
        """Random base: Gaussian weights scaled by fan-in, unit norms. Frozen."""
        dtype = np.dtype(config.dtype)

        def gaussian(shape, std):
            return Tensor(rng.normal(0.0, std, size=shape).astype(dtype))

        blocks = []
        for _ in range(config.n_layers):
            weights = {}
            for name in PROJECTIONS:
                d_out, d_in = projection_shape(name, config)
                weights[name] = gaussian((d_out, d_in), 1.0 / np.sqrt(d_in))
            blocks.append(
                Block(
                    attn_norm=Tensor(np.ones(config.d_model, dtype=dtype)),
                    mlp_norm=Tensor(np.ones(config.d_model, dtype=dtype)),
                    weights=weights,
                )
            )
        return cls(
            config,
            embed=gaussian((config.vocab_size, config.d_model), 1.0),
            blocks=blocks,
            final_norm=Tensor(np.ones(config.d_model, dtype=dtype)),
            lm_head=gaussian((config.vocab_size, config.d_model), 1.0 / np.sqrt(config.d_model)),
        )

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "BaseModel":
        """Rebuild a frozen base from arrays named as in ``parameters()``.

        Raises:
            KeyError: If a base tensor is missing.
        """

        def get(name):
            return Tensor(np.array(arrays[name], copy=True))

        blocks = [
            Block(
                attn_norm=get(f"base.blocks.{b}.attn_norm"),
                mlp_norm=get(f"base.blocks.{b}.mlp_norm"),
                weights={name: get(f"base.blocks.{b}.{name}") for name in PROJECTIONS},
            )
            for b in range(config.n_layers)
        ]
        return cls(config, get("base.embed"), blocks, get("base.final_norm"), get("base.lm_head"))

    @property
    def dtype(self):
        return self.embed.dtype

    def parameters(self) -> dict[str, Tensor]:
        """Every base tensor by name, in a stable order."""
        params = {"base.embed": self.embed}
        for b, block in enumerate(self.blocks):
            params[f"base.blocks.{b}.attn_norm"] = block.attn_norm
            for name in PROJECTIONS:
                params[f"base.blocks.{b}.{name}"] = block.weights[name]
            params[f"base.blocks.{b}.mlp_norm"] = block.mlp_norm
        params["base.final_norm"] = self.final_norm
        params["base.lm_head"] = self.lm_head
        return params

    def freeze(self) -> None:
        for param in self.parameters().values():
            param.requires_grad = False

    def unfreeze(self) -> None:
        for param in self.parameters().values():
            param.requires_grad = True

    @property
    def is_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters().values())

    def base_project(self, block: int, name: str, x: Tensor, block_input: Tensor) -> Tensor:
        return x @ self.blocks[block].weights[name].T

    def forward(self, tokens: Sequence[int]) -> Tensor:
        """Causal language-model logits ``T x V`` of the bare base."""
        return run_transformer(self, tokens)


def check_tokens(base: BaseModel, tokens: Sequence[int]) -> np.ndarray:
    """Validate token ids against the vocabulary and context length.

    Raises:
        InputError: If the sequence is empty, too long, or holds unknown ids.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or len(ids) == 0:
        raise InputError(f"expected a non-empty token sequence, got shape {ids.shape}")
    if len(ids) > base.config.max_len:
        raise InputError(f"sequence of {len(ids)} tokens exceeds max_len={base.config.max_len}")
    if ids.min() < 0 or ids.max() >= base.config.vocab_size:
        raise InputError(f"token ids must lie in [0, {base.config.vocab_size}), got {ids.min()}..{ids.max()}")
    return ids


def _attention(base: BaseModel, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    seq_len = q.shape[0]
    n_heads = base.config.n_heads
    head_dim = base.config.d_model // n_heads
    q = rope(q, base.cos, base.sin, n_heads)
    k = rope(k, base.cos, base.sin, n_heads)
    mask = base._mask[:seq_len, :seq_len]
    scale = 1.0 / np.sqrt(head_dim)
    heads = []
    for h in range(n_heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
        scores = (qh @ kh.T) * scale + mask
        heads.append(softmax(scores, axis=-1) @ vh)
    return concat(heads, axis=-1)


def run_transformer(base: BaseModel, tokens: Sequence[int], project: Optional[ProjectFn] = None) -> Tensor:
    """Run the decoder, calling ``project`` for each of the seven projections.

    ``project`` defaults to the frozen linear map; adapted models pass a hook
    that adds their deltas to it.
    """
    ids = check_tokens(base, tokens)
    project = project or base.base_project
    eps = base.config.norm_eps
    h = embedding(base.embed, ids)
    for b, block in enumerate(base.blocks):
        block_input = h
        x = rms_norm(h, block.attn_norm, eps)
        q = project(b, "q", x, block_input)
        k = project(b, "k", x, block_input)
        v = project(b, "v", x, block_input)
        h = h + project(b, "o", _attention(base, q, k, v), block_input)
        x = rms_norm(h, block.mlp_norm, eps)
        gated = silu(project(b, "mlp_gate", x, block_input)) * project(b, "mlp_up", x, block_input)
        h = h + project(b, "mlp_down", gated, block_input)
    h = rms_norm(h, base.final_norm, eps)
    return h @ base.lm_head.T
