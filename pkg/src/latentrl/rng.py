"""Seeded random streams keyed by integer coordinates."""
from __future__ import annotations

import numpy as np

# Stream domains, used as the second key so different consumers never collide.
DATA = 1
ROLLOUT = 2
EVAL = 3
INIT = 4
PRETRAIN = 5


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; same keys, same stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))
