"""Seeded root generator with labelled forks.

Every stochastic subsystem draws from ``fork(label)`` so that adding
randomness in one place never shifts the stream seen by another.
"""

from __future__ import annotations

import random
import zlib

import numpy as np
import torch

_root_seed = 0


def set_global_seed(seed: int) -> None:
    global _root_seed
    _root_seed = int(seed)
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def root_seed() -> int:
    return _root_seed


def fork_seed(label: str, *keys: int, seed: int | None = None) -> int:
    base = _root_seed if seed is None else int(seed)
    spawn_key = (zlib.crc32(label.encode()),) + tuple(int(k) for k in keys)
    ss = np.random.SeedSequence(entropy=base % 2**63, spawn_key=spawn_key)
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def torch_generator(label: str, *keys: int, seed: int | None = None) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(fork_seed(label, *keys, seed=seed))
    return g


def numpy_rng(label: str, *keys: int, seed: int | None = None) -> np.random.Generator:
    return np.random.default_rng(fork_seed(label, *keys, seed=seed))
