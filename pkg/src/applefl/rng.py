"""Named random streams fanned out from one run seed.

Every consumer derives its own generator from ``(seed, stream, *indices)`` so
that adding a new consumer, or reordering work across threads, never shifts
the numbers another consumer sees.
"""

from __future__ import annotations

import numpy as np

INIT = 1
PARTITION = 2
DATA = 3
SELECT = 4
SHUFFLE = 5
FINETUNE = 6


def stream(seed: int, kind: int, *indices: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), kind, *map(int, indices)])))
