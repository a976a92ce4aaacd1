"""Deterministic RNG sub-streams.

Every random draw in the package flows from a single root seed through a
named sub-stream, so toggling one pipeline stage never perturbs the draws
of another.  Stream identity = (root seed, sha256 of the stream name, extra
integer indices).
"""

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def rng_for(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return the generator for sub-stream `name` (+ optional indices) of `seed`."""
    return np.random.default_rng([int(seed), _name_key(name), *[int(i) for i in indices]])
