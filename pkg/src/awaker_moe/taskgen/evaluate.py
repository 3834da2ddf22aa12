"""Greedy decoding and exact-match accuracy."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np

from awaker_moe.config import RoutingConfig
from awaker_moe.errors import InputError
from awaker_moe.model import BaseModel
from awaker_moe.routing import RoutingContext, route_instance
from awaker_moe.tensor import no_grad

from .tasks import TaskInstance

logger = logging.getLogger(__name__)


def _logits(model, tokens, ctx: Optional[RoutingContext]):
    if isinstance(model, BaseModel):
        return model.forward(tokens)
    return model.logits(tokens, ctx)


def greedy_decode(model, inst: TaskInstance, routing: Optional[RoutingConfig] = None) -> list[int]:
    """Decode ``len(inst.response)`` tokens after the prompt of ``inst``.

    The routing decision is made once, from the prompt, in eval mode. In
    token-level mode each generated position is routed as it appears.
    """
    routing = routing or RoutingConfig()
    prompt = inst.prompt_only()
    with no_grad():
        ctx = None
        if not isinstance(model, BaseModel):
            ctx = route_instance(model, prompt, routing.mode, False, None, routing.pooling)
        tokens = list(prompt.tokens)
        for _ in range(len(inst.response)):
            logits = _logits(model, tokens, ctx)
            tokens.append(int(np.argmax(logits.data[-1])))
    return tokens[len(prompt.tokens) :]


def is_exact_match(model, inst: TaskInstance, routing: Optional[RoutingConfig] = None) -> bool:
    return greedy_decode(model, inst, routing) == list(inst.response)


def eval_accuracy(
    model,
    split: Sequence[TaskInstance],
    routing: Optional[RoutingConfig] = None,
    workers: int = 1,
) -> dict[int, float]:
    """Exact-match accuracy per task id over ``split``.

    With ``workers > 1`` instances are scored on a thread pool; the model is
    only read.

    Raises:
        InputError: If ``split`` is empty.
    """
    if not split:
        raise InputError("cannot evaluate an empty split")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            hits = list(pool.map(lambda inst: is_exact_match(model, inst, routing), split))
    else:
        hits = [is_exact_match(model, inst, routing) for inst in split]

    correct: dict[int, int] = {}
    seen: dict[int, int] = {}
    for inst, hit in zip(split, hits):
        seen[inst.task] = seen.get(inst.task, 0) + 1
        correct[inst.task] = correct.get(inst.task, 0) + int(hit)
    accuracy = {task: correct[task] / seen[task] for task in sorted(seen)}
    logger.debug("accuracy over %d instances: %s", len(split), accuracy)
    return accuracy


def collect_routing_logs(
    model,
    split: Sequence[TaskInstance],
    routing: Optional[RoutingConfig] = None,
    mode: Optional[str] = None,
) -> list[list]:
    """Eval-mode decision log of every instance, routed from its prompt."""
    routing = routing or RoutingConfig()
    mode = mode or routing.mode
    with no_grad():
        return [route_instance(model, inst.prompt_only(), mode, False, None, routing.pooling).log for inst in split]


def mean_accuracy(per_task: dict[int, float]) -> float:
    """Unweighted mean over tasks."""
    if not per_task:
        raise InputError("no task accuracies to average")
    return float(np.mean(list(per_task.values())))
