"""Task-agnostic language-model pretraining of the base.

The base is trained once, before any adapter stage, on a generic mix of
digit sequences: uniform random strings, periodic repeats and counting
runs, joined by separators. None of the corpus instructions appear, so the
base knows the vocabulary but not the tasks.
"""

from __future__ import annotations

import logging

import numpy as np
from tqdm import tqdm

from awaker_moe.config import ModelConfig, PretrainConfig
from awaker_moe.model import BaseModel
from awaker_moe.tensor import OptimizerState, cross_entropy_masked, make_rng, optimizer_step, zero_grad

from .schedule import cosine_lr

logger = logging.getLogger(__name__)

SEP = 10


def _segment(rng: np.random.Generator) -> list[int]:
    kind = int(rng.integers(0, 3))
    length = int(rng.integers(3, 9))
    if kind == 0:
        return [int(x) for x in rng.integers(0, 10, size=length)]
    if kind == 1:
        pattern = [int(x) for x in rng.integers(0, 10, size=int(rng.integers(1, 4)))]
        return [pattern[i % len(pattern)] for i in range(length)]
    start = int(rng.integers(0, 10))
    return [(start + i) % 10 for i in range(length)]


def pretrain_sequence(rng: np.random.Generator, seq_len: int) -> list[int]:
    """One training sequence of exactly ``seq_len`` tokens."""
    tokens: list[int] = []
    while len(tokens) < seq_len:
        tokens.extend(_segment(rng))
        tokens.append(SEP)
    return tokens[:seq_len]


def pretrain_base(
    model_cfg: ModelConfig,
    pretrain_cfg: PretrainConfig,
    seed: int,
    progress: bool = False,
) -> BaseModel:
    """Initialize a base from ``seed``, train it on the generic mix, freeze it."""
    base = BaseModel.init(model_cfg, make_rng(seed, "init", 0))
    steps = pretrain_cfg.steps
    seq_len = min(pretrain_cfg.seq_len, model_cfg.max_len)
    if steps == 0:
        base.freeze()
        return base

    base.unfreeze()
    params = base.parameters()
    optimizer = OptimizerState(lr=pretrain_cfg.lr)
    rng = make_rng(seed, "data", 0)
    mask = [True] * (seq_len - 1)
    losses = []
    bar = tqdm(range(steps), desc="pretrain", disable=not progress)
    for step in bar:
        zero_grad(params)
        total = None
        for _ in range(pretrain_cfg.batch_size):
            tokens = pretrain_sequence(rng, seq_len)
            loss = cross_entropy_masked(base.forward(tokens)[:-1], tokens[1:], mask)
            total = loss if total is None else total + loss
        loss = total * (1.0 / pretrain_cfg.batch_size)
        loss.backward()
        optimizer_step(optimizer, params, cosine_lr(step, steps, pretrain_cfg.lr, pretrain_cfg.warmup))
        losses.append(loss.item())
        bar.set_postfix(loss=f"{losses[-1]:.4f}")
    zero_grad(params)
    base.freeze()
    logger.info("pretrained base for %d steps: loss %.4f -> %.4f", steps, losses[0], losses[-1])
    return base
