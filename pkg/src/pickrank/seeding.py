"""Named random sub-streams derived from one top-level seed.

Every consumer of randomness asks for a stream by path, e.g.
``derive_seed(root, "scene", 12)``; the same path always yields the same
64-bit seed, independently of call order.
"""

import hashlib

import numpy as np


def derive_seed(root, *path):
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode())
    for part in path:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest(), "little")


def rng_for(root, *path):
    return np.random.default_rng(derive_seed(root, *path))
