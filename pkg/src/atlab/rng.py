"""Deterministic seed derivation.

All randomness in a run flows from one root seed. Sub-seeds are derived by
hashing the root together with a tag path (e.g. ("attack", epoch, batch)),
so runs reproduce bitwise and streams never alias across purposes.
"""

import hashlib

import torch

_MASK = (1 << 63) - 1


def derive_seed(root, *parts):
    """Map (root, *parts) to a stable 63-bit seed. Parts may be ints or strings."""
    payload = repr((int(root),) + tuple(parts)).encode()
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "little") & _MASK


def generator(seed):
    """CPU torch.Generator seeded with `seed`."""
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed))
    return g
