"""Per-shot random streams.

Every shot draws from its own counter-based Philox generator whose key is
derived from ``(master_seed, shot_id)`` through :class:`numpy.random.SeedSequence`.
A shot's random numbers therefore never depend on which worker simulated it
or on how many shots ran before it.
"""

import numpy as np

__all__ = ["shot_stream", "shot_streams"]


def shot_stream(master_seed, shot_id, purpose=0):
    """Return the generator for one shot.

    ``purpose`` separates independent uses of the same shot id (for instance
    the source draw and a later analysis shuffle).
    """
    if master_seed < 0 or shot_id < 0:
        raise ValueError("master_seed and shot_id must be non-negative")
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(shot_id), int(purpose)))
    return np.random.Generator(np.random.Philox(seq))


def shot_streams(master_seed, shot_ids, purpose=0):
    return [shot_stream(master_seed, s, purpose) for s in shot_ids]
