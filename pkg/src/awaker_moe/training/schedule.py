"""Learning-rate schedule."""

import math

from awaker_moe.errors import ConfigError


def cosine_lr(step: int, total: int, base_lr: float, warmup: int = 0) -> float:
    """Linear warmup to ``base_lr`` at ``step == warmup``, then cosine decay to 0 at ``total``.

    The warmup ramp is ``base_lr * (step + 1) / (warmup + 1)`` so no step
    trains at a zero rate.

    Raises:
        ConfigError: If ``total`` is not positive or ``step`` lies outside ``[0, total]``.
    """
    if total <= 0:
        raise ConfigError(f"schedule needs a positive number of steps, got total={total}")
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return base_lr * (step + 1) / (warmup + 1)
    decay = total - warmup
    if decay <= 0:
        return 0.0
    progress = (step - warmup) / decay
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
