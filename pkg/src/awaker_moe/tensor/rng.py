"""Seeded random streams.

One run seed fans out into independent named streams so that changing, say,
the data order never perturbs initialization.
"""

from __future__ import annotations

import numpy as np

STREAMS = ("init", "noise", "data")


def make_rng(seed: int, stream: str, *extra: int) -> np.random.Generator:
    """Return the generator for ``stream`` under ``seed``.

    ``extra`` integers (e.g. a stage id) further separate sub-streams.
    """
    if stream not in STREAMS:
        raise ValueError(f"unknown random stream {stream!r}; expected one of {STREAMS}")
    entropy = [int(seed), STREAMS.index(stream), *[int(e) for e in extra]]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-serializable state of ``rng``."""
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    """Rebuild a generator from ``rng_state`` output."""
    bit_generator = np.random.PCG64()
    bit_generator.state = state
    return np.random.Generator(bit_generator)
