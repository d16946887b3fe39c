"""Seeded random streams.

Every stochastic routine takes a ``numpy.random.Generator``. Work that may be
split across processes derives its streams from ``(seed, *keys)`` so that the
draws for a given replicate do not depend on how work is scheduled.
"""
import numpy as np


def substream(seed, *keys):
    """Counter-based (Philox) generator keyed by seed and integer indices."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        raise ValueError("an explicit seed or Generator is required")
    return substream(rng)
