"""Named random substreams derived from one master seed.

Each purpose (prompt sampling, zoo generation, BAI rounds, ...) gets its own
generator so toggling one feature never shifts another's draws.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def _name_key(name: str | int) -> int:
    if isinstance(name, int):
        return name & 0xFFFFFFFF
    digest = hashlib.blake2b(str(name).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "big")


def substream(master_seed: int, *names: str | int) -> np.random.Generator:
    """Generator for the substream identified by ``names``."""
    seq = np.random.SeedSequence(
        entropy=int(master_seed) & MASK64, spawn_key=tuple(_name_key(n) for n in names)
    )
    return np.random.Generator(np.random.PCG64(seq))


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def splitmix64_array(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64, copy=True)
    x += np.uint64(0x9E3779B97F4A7C15)
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return x
