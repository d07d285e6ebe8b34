"""Named, reproducible random streams derived from one root seed.

Every consumer of randomness asks for a stream by name, e.g.
``stream(seed, "client", 3, "batches")``. The same (seed, name) pair always
yields the same generator, regardless of the order in which streams are
created, so parallel or reordered execution cannot change results.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    """Return the generator for the named stream under ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.default_rng(ss)


def derive_seed(seed: int, *names) -> int:
    """A 32-bit child seed, for handing to code that wants an integer."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return int(ss.generate_state(1)[0])
