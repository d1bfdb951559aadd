"""Named random substreams derived from one root seed.

Each stage draws from its own stream (``"data"``, ``"augment"``,
``"init"``, ...), so changing how much one stage consumes never shifts
another stage's numbers.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def substream(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode()),))


def generator(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream(seed, name))


def int_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).generate_state(1, dtype=np.uint32)[0])


def seed_torch(seed: int, name: str) -> None:
    torch.manual_seed(int_seed(seed, name))
