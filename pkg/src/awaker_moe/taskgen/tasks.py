"""Synthetic multi-task corpus.

Every task reads the same kind of input (a short string of digits) and asks
for a different output, so a single shared adapter is pulled in conflicting
directions. An instance is laid out as::

    instruction  SEP  input digits  SEP  response digits

The instruction tokens form the instruction span and everything after them
up to the response forms the input span. Routing sees only the instruction span and
the loss covers only the response.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from awaker_moe.errors import ConfigError, InputError
from awaker_moe.routing import InstanceSegments
from awaker_moe.tensor import make_rng

logger = logging.getLogger(__name__)

DIGITS = tuple(range(10))
SEP = 10
FIRST_INSTRUCTION_TOKEN = 11

SPLITS = ("train", "val", "test")


def _copy(xs: Sequence[int]) -> list[int]:
    return list(xs)


def _reverse(xs: Sequence[int]) -> list[int]:
    return list(reversed(xs))


def _increment(xs: Sequence[int]) -> list[int]:
    return [(x + 1) % 10 for x in xs]


def _sort(xs: Sequence[int]) -> list[int]:
    return sorted(xs)


TRANSFORMS: dict[str, Callable[[Sequence[int]], list[int]]] = {
    "copy": _copy,
    "reverse": _reverse,
    "increment": _increment,
    "sort": _sort,
}


@dataclass(frozen=True)
class TaskSpec:
    """One task of the corpus.

    Attributes:
        task_id: Integer label stored with each instance.
        name: Transform name (copy, reverse, increment, sort).
        instruction: Token ids announcing the task.
        input_len: Inclusive range of input lengths.
    """

    task_id: int
    name: str
    instruction: tuple[int, ...]
    input_len: tuple[int, int] = (3, 6)

    def __post_init__(self):
        if self.name not in TRANSFORMS:
            raise ConfigError(f"unknown transform {self.name!r}; expected one of {sorted(TRANSFORMS)}")
        if not self.instruction:
            raise ConfigError(f"task {self.name} has an empty instruction")
        if SEP in self.instruction or any(t in DIGITS for t in self.instruction):
            raise ConfigError(f"instruction of {self.name} reuses digit or separator tokens")

    def respond(self, xs: Sequence[int]) -> list[int]:
        return TRANSFORMS[self.name](xs)

    def make_instance(self, xs: Sequence[int]) -> "TaskInstance":
        prompt = [*self.instruction, SEP, *xs, SEP]
        return TaskInstance(
            task=self.task_id,
            tokens=tuple(prompt + self.respond(xs)),
            instr_end=len(self.instruction),
            resp_start=len(prompt),
        )

    def sample(self, rng: np.random.Generator) -> "TaskInstance":
        lo, hi = self.input_len
        length = int(rng.integers(lo, hi + 1))
        return self.make_instance([int(x) for x in rng.integers(0, 10, size=length)])


def default_task_specs(names: Sequence[str] = tuple(TRANSFORMS), input_len: tuple[int, int] = (3, 6)) -> list[TaskSpec]:
    """Tasks with two-token instructions ``(11, 12)``, ``(13, 14)``, ..."""
    return [
        TaskSpec(
            task_id=i,
            name=name,
            instruction=(FIRST_INSTRUCTION_TOKEN + 2 * i, FIRST_INSTRUCTION_TOKEN + 2 * i + 1),
            input_len=tuple(input_len),
        )
        for i, name in enumerate(names)
    ]


@dataclass(frozen=True)
class TaskInstance:
    """A tokenized instance with its span boundaries."""

    task: int
    tokens: tuple[int, ...]
    instr_end: int
    resp_start: int

    def __post_init__(self):
        InstanceSegments.from_bounds(len(self.tokens), self.instr_end, self.resp_start)

    @property
    def segments(self) -> InstanceSegments:
        return InstanceSegments.from_bounds(len(self.tokens), self.instr_end, self.resp_start)

    @property
    def prompt(self) -> tuple[int, ...]:
        return self.tokens[: self.resp_start]

    @property
    def response(self) -> tuple[int, ...]:
        return self.tokens[self.resp_start :]

    @property
    def targets(self) -> tuple[int, ...]:
        """Next-token targets of positions ``0 .. T-2``."""
        return self.tokens[1:]

    @property
    def loss_mask(self) -> list[bool]:
        """Flags over ``T-1`` positions; position ``t`` is scored when it predicts a response token."""
        return [t + 1 >= self.resp_start for t in range(len(self.tokens) - 1)]

    def prompt_only(self) -> "TaskInstance":
        """The instance truncated to its prompt (empty response)."""
        return TaskInstance(self.task, self.prompt, self.instr_end, self.resp_start)

    def with_response(self, response: Sequence[int]) -> "TaskInstance":
        return TaskInstance(self.task, self.prompt + tuple(int(t) for t in response), self.instr_end, self.resp_start)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "tokens": list(self.tokens),
            "instr_end": self.instr_end,
            "resp_start": self.resp_start,
        }


class InstanceRecord(BaseModel):
    """One JSONL corpus line."""

    task: int = Field(ge=0)
    tokens: list[int] = Field(min_length=2)
    instr_end: int = Field(ge=1)
    resp_start: int = Field(ge=1)

    @model_validator(mode="after")
    def _spans_fit(self) -> "InstanceRecord":
        if self.resp_start > len(self.tokens):
            raise ValueError(f"resp_start={self.resp_start} beyond {len(self.tokens)} tokens")
        return self

    def to_instance(self) -> TaskInstance:
        return TaskInstance(self.task, tuple(self.tokens), self.instr_end, self.resp_start)


def check_disjoint_instructions(specs: Sequence[TaskSpec]) -> None:
    """Raises ConfigError if one instruction is a prefix of another."""
    if len(specs) < 2:
        raise ConfigError(f"the corpus needs at least two tasks, got {len(specs)}")
    for i, a in enumerate(specs):
        for b in specs[i + 1 :]:
            shorter = min(len(a.instruction), len(b.instruction))
            if a.instruction[:shorter] == b.instruction[:shorter]:
                raise ConfigError(f"instructions of {a.name} {a.instruction} and {b.name} {b.instruction} overlap")
    ids = [s.task_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate task ids {ids}")


def gen_corpus(specs: Sequence[TaskSpec], sizes: dict[str, int], seed: int) -> dict[str, list[TaskInstance]]:
    """Generate train/val/test splits with ``sizes[split]`` instances per task.

    Each split draws from its own seeded stream and is shuffled, so the
    result depends only on ``specs``, ``sizes`` and ``seed``.

    Raises:
        ConfigError: On fewer than two tasks or overlapping instructions.
    """
    check_disjoint_instructions(specs)
    corpus: dict[str, list[TaskInstance]] = {}
    for split_index, split in enumerate(SPLITS):
        per_task = int(sizes.get(split, 0))
        rng = make_rng(seed, "data", 100 + split_index)
        instances = [spec.sample(rng) for spec in specs for _ in range(per_task)]
        order = rng.permutation(len(instances))
        corpus[split] = [instances[i] for i in order]
        logger.debug("generated %d %s instances", len(instances), split)
    return corpus


def write_jsonl(path: Path, instances: Iterable[TaskInstance]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for inst in instances:
            f.write(json.dumps(inst.to_dict(), sort_keys=True) + "\n")


def read_jsonl(path: Path) -> list[TaskInstance]:
    """Load a corpus split.

    Raises:
        InputError: If the file is missing or a line does not match the schema.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"corpus file {path} does not exist")
    instances = []
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                instances.append(InstanceRecord.model_validate_json(line).to_instance())
            except (ValidationError, InputError) as e:
                raise InputError(f"{path}:{lineno}: {e}") from e
    return instances


def write_corpus(corpus: dict[str, list[TaskInstance]], out_dir: Path) -> dict[str, Path]:
    """Write each split to ``out_dir/<split>.jsonl``."""
    paths = {}
    for split, instances in corpus.items():
        paths[split] = Path(out_dir) / f"{split}.jsonl"
        write_jsonl(paths[split], instances)
    return paths


def read_corpus(corpus_dir: Path) -> dict[str, list[TaskInstance]]:
    return {split: read_jsonl(Path(corpus_dir) / f"{split}.jsonl") for split in SPLITS}
