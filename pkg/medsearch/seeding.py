"""
Named seed derivation.

One global seed governs a whole experiment; every component draws its own
seed from ``(global seed, component name)`` so subcommands stay reproducible
independently of each other.
"""
import hashlib

import numpy as np


def derive_seed(seed: int, *names: object) -> int:
    """Derive a 63-bit seed from a global seed and a component path."""
    key = ':'.join([str(int(seed))] + [str(name) for name in names])
    digest = hashlib.blake2b(key.encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'little') >> 1


def derive_rng(seed: int, *names: object) -> np.random.Generator:
    """Numpy generator seeded from :func:`derive_seed`."""
    return np.random.default_rng(derive_seed(seed, *names))
