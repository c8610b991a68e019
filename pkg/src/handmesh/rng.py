"""Deterministic random streams, one independent substream per purpose.

Every consumer (weight init, data generation, batch order, ...) pulls its
own named generator from a single experiment seed, so adding a new
consumer never perturbs the draws of existing ones.
"""

import numpy as np


def substream(seed, name):
    """Return a Generator for (seed, name), independent across names."""
    digest = np.frombuffer(name.encode("utf-8"), dtype=np.uint8)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(b) for b in digest))
    return np.random.Generator(np.random.PCG64(ss))
