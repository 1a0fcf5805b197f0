"""Deterministic derivation of independent, named RNG streams.

Every random decision in the pipeline draws from a stream keyed by
(base seed, role, ...indices), so runs are reproducible and streams stay
independent under parallel execution.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(*parts) -> int:
    """Mix arbitrary (seed, role, index, ...) parts into a stable 63-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little") >> 1


def numpy_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def torch_generator(*parts) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(*parts))
    return gen
