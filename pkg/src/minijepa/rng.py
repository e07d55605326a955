"""Named deterministic RNG streams derived from a single run seed.

Every consumer derives its own generator from (seed, stream name, counters),
so drawing more from one stream never perturbs another, and per-sample
streams make results independent of batch iteration order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_words(name: str) -> tuple[int, int]:
    digest = hashlib.blake2s(name.encode("utf-8"), digest_size=8).digest()
    return (int.from_bytes(digest[:4], "little"),
            int.from_bytes(digest[4:], "little"))


def stream(seed: int, name: str, *counters: int) -> np.random.Generator:
    """Generator for stream `name` at the given counter coordinates."""
    w0, w1 = _name_words(name)
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, w0, w1, *[int(c) for c in counters]]
    return np.random.default_rng(np.random.SeedSequence(entropy))
