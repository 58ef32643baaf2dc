"""
Named random streams derived from a single root seed.

Every random consumer (ingest, fold, init, batch, noise) draws from its own
stream so that one component can be replayed without touching the others.
"""

import zlib
from typing import Tuple, Union

import numpy as np

STREAMS = ("ingest", "fold", "init", "batch", "noise")


class SeedStreams:
    """Expands a root seed into independent ``numpy`` generators by name."""

    def __init__(self, root_seed: int):
        self.root_seed = int(root_seed)

    def seed_sequence(self, name: str, *path: Union[int, str]) -> np.random.SeedSequence:
        """Seed sequence for ``name`` optionally specialised by a path (fold, cell, ...)."""
        key: Tuple[int, ...] = (self.root_seed, zlib.crc32(name.encode("utf-8")))
        for part in path:
            if isinstance(part, str):
                key += (zlib.crc32(part.encode("utf-8")),)
            else:
                key += (int(part),)
        return np.random.SeedSequence(list(key))

    def generator(self, name: str, *path: Union[int, str]) -> np.random.Generator:
        return np.random.default_rng(self.seed_sequence(name, *path))

    def child_seed(self, name: str, *path: Union[int, str]) -> int:
        """A plain integer seed for APIs that take one (32 bits, deterministic)."""
        return int(self.seed_sequence(name, *path).generate_state(1)[0])
