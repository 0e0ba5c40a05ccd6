"""Counter-style random streams: (seed, path...) -> independent generator.

Each (seed, path) pair owns its own stream, so consuming draws in one stream
never perturbs another. This is what makes per-beam masking stable under
changes to the number of beams, and per-frame augmentation stable under
reordering of the training loop.
"""

import numpy as np

# Domain tags keep streams for different purposes disjoint at equal indices.
MASK = 1
INTERPOLATE = 2
RENDER = 3
FRAME = 4


def stream(seed: int, *path: int) -> np.random.Generator:
    """Deterministic generator for the given seed and integer path."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *path: int) -> int:
    """Deterministic 64-bit child seed for the given seed and integer path."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(2, np.uint32).view(np.uint64)[0])
