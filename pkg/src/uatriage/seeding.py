"""Counter-based random streams.

Every stochastic decision in the package is drawn from a Philox generator
whose key is a pure function of integers (a seed plus counters), so results
never depend on the order in which streams are created or consumed.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def keyed_generator(seed: int, counter: int = 0) -> np.random.Generator:
    """Philox generator keyed by the 128-bit pair ``(seed, counter)``."""
    key = (int(seed) & MASK64) | ((int(counter) & MASK64) << 64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, *path: int) -> int:
    """Hash a seed and a path of counters into a fresh 64-bit seed."""
    entropy = [int(seed) & MASK64, *(int(p) & MASK64 for p in path)]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def stream(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for a named position ``path`` under ``seed``."""
    return keyed_generator(derive_seed(seed, *path))
