"""Reproducible random streams.

Every random draw in the workbench comes from a stream keyed by
``(master_seed, purpose, *indices)``. Keys are hashed through numpy's
``SeedSequence``, which is a documented, platform-independent splitting
scheme, so a given image at a given epoch always sees the same channel
realization regardless of batch composition or order.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch

# Purpose tags keep streams for different consumers disjoint.
PURPOSE_CHANNEL = "channel"
PURPOSE_SHUFFLE = "shuffle"
PURPOSE_AUGMENT = "augment"
PURPOSE_INIT = "init"
PURPOSE_EVAL = "eval"
PURPOSE_EXTRACTOR = "extractor"


def _purpose_word(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def seed_sequence(master_seed: int, purpose: str, *indices: int) -> np.random.SeedSequence:
    if master_seed < 0 or master_seed >= 2**64:
        raise ValueError(f"master seed must be a 64-bit unsigned integer, got {master_seed}")
    key = (_purpose_word(purpose),) + tuple(int(i) for i in indices)
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=key)


def numpy_stream(master_seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """PCG64 generator for ``(master_seed, purpose, *indices)``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(master_seed, purpose, *indices)))


def torch_stream(master_seed: int, purpose: str, *indices: int) -> torch.Generator:
    """CPU torch generator seeded from the same key derivation."""
    state = seed_sequence(master_seed, purpose, *indices).generate_state(1, dtype=np.uint64)[0]
    g = torch.Generator(device="cpu")
    # torch.Generator.manual_seed accepts values below 2**63 portably.
    g.manual_seed(int(state) & (2**63 - 1))
    return g
