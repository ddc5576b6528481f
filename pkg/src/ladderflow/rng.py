"""Seedable, splittable random streams.

Every random draw in the project comes from a named sub-stream derived as
hash(root seed, purpose string, indices...). Streams are counter-based
(Philox), so any sample index can be regenerated independently of all
others -- that is what makes data generation parallel-safe and training
resumable without serializing generator state.
"""

import hashlib

import numpy as np


def stream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Return the generator for a (seed, purpose, indices...) sub-stream."""
    tag = f"{seed}|{purpose}|" + "|".join(str(i) for i in indices)
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))
