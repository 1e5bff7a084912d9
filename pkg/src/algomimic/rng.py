"""Named random substreams derived from a single root seed.

Every stochastic component (dataset sampling, parameter init, batch
shuffling, ...) pulls its own generator via `substream(root, "name", ...)`.
Streams with different names are statistically independent, and the same
(root, names) pair always yields the same stream, which is what makes whole
runs replayable byte for byte.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str | int) -> int:
    if isinstance(name, int):
        return name & 0xFFFFFFFF
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def substream(root_seed: int, *names: str | int) -> np.random.Generator:
    """Generator for the substream identified by `names` under `root_seed`."""
    if not names:
        raise ValueError("substream requires at least one name")
    key = tuple(_name_key(n) for n in names)
    seq = np.random.SeedSequence(entropy=int(root_seed) & ((1 << 63) - 1), spawn_key=key)
    return np.random.default_rng(seq)
