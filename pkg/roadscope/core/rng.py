"""
Seeded random streams.

All randomized stages draw from numpy's PCG64 bit generator. A stream is
identified by ``(seed, purpose)``; the purpose label is hashed into the
SeedSequence spawn key so independent stages never share state and adding a
new stage does not perturb existing ones.
"""
import hashlib

import numpy as np

GENERATOR_NAME = "PCG64"


def _purpose_key(purpose: str) -> tuple:
    digest = hashlib.sha256(purpose.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


def derive_rng(seed: int, purpose: str) -> np.random.Generator:
    """Return the PCG64 generator for ``purpose`` under ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_purpose_key(purpose))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, purpose: str) -> int:
    """A 63-bit integer seed for libraries that take plain integers (torch)."""
    return int(derive_rng(seed, purpose).integers(0, 2**63 - 1))
