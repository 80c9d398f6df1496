"""
Hierarchical seed derivation.
One root seed fans out into independent streams keyed by stage name and index.
"""
import hashlib

import numpy as np

_SEED_BITS = 63


def derive_seed(root, *path):
    """
    Derive a child seed from a root seed and a key path.

    Args:
        root: Root integer seed
        *path: Stage names and indices, e.g. ("ensemble", "member", 3)

    Returns:
        Non-negative integer seed, stable across platforms and Python versions
    """
    key = "/".join([str(int(root))] + [str(p) for p in path])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> (64 - _SEED_BITS)


def make_rng(seed):
    """Build a numpy Generator from an int or a tuple of ints."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (tuple, list)):
        return np.random.default_rng([int(s) for s in seed])
    return np.random.default_rng(int(seed))
