"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(seed, stream, block)``, so results do not depend on how blocks are
scheduled.  ``stream`` separates independent consumers (models, source
atoms) that share one user seed.
"""

import numpy as np

BLOCK_SIZE = 65536
_MASK64 = (1 << 64) - 1


def block_generator(seed: int, stream: int, block: int) -> np.random.Generator:
    key = np.array([int(seed) & _MASK64, ((int(stream) & 0xFFFFFF) << 40) | (int(block) & ((1 << 40) - 1))], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def blocks(n: int, block_size: int = BLOCK_SIZE):
    """Yield ``(block_index, start, stop)`` covering ``range(n)``."""
    for b, start in enumerate(range(0, n, block_size)):
        yield b, start, min(n, start + block_size)


def derive_seed(seed: int, *keys: int) -> int:
    """64-bit child seed for the consumer labelled ``keys`` under a user seed."""
    state = np.random.SeedSequence([int(seed) & _MASK64, *[int(k) for k in keys]]).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)
