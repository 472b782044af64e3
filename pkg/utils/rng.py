"""
Random Streams

Counter-based random generators: every consumer derives its own stream from
(base_seed, purpose, index...), so results never depend on call order or on how
work is split across threads.
"""

import numpy as np

# Purpose tags keep streams of different consumers apart.
MODEL_INIT = 1
MASKING = 2
BATCHING = 3
CROPPING = 4
SPLITTING = 5
PROBE = 6
TSNE = 7


def stream(base_seed: int, *counters: int) -> np.random.Generator:
    """
    Create an independent generator for one (seed, counters...) key.

    Args:
        base_seed: Run seed
        counters: Purpose tag followed by any indices (step, image, candidate...)

    Returns:
        numpy Generator seeded from the full key
    """
    key = [int(base_seed)] + [int(c) for c in counters]
    if any(k < 0 for k in key):
        raise ValueError(f"random stream key must be non-negative, got {key}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
