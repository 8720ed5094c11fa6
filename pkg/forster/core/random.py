"""
Random streams.

Every randomized routine takes an explicit numpy Generator built on the
counter-based Philox bit generator. Independent substreams come from
Generator.spawn (for recursion and trials) or from keyed seed sequences (for
lazily indexed families, where term i must be reproducible on its own).
"""

from typing import List, Optional, Union

import numpy as np

RngLike = Union[None, int, np.random.Generator]


def make_rng(seed: Optional[int] = None) -> np.random.Generator:
    """Return a Philox-backed generator for the given seed."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def as_generator(rng: RngLike) -> np.random.Generator:
    """Accept a seed or an existing generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return make_rng(rng)


def spawn(rng: np.random.Generator, count: int) -> List[np.random.Generator]:
    """Split off `count` independent child generators."""
    return rng.spawn(count)


def draw_seed(rng: np.random.Generator) -> int:
    """Draw a base seed for a keyed family."""
    return int(rng.integers(0, 2**63 - 1))


def keyed_rng(base_seed: int, *keys: int) -> np.random.Generator:
    """Generator for the substream identified by (base_seed, *keys)."""
    entropy = [int(base_seed)] + [int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
