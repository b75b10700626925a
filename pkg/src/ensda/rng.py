"""Counter-based random streams keyed on (seed, cycle, member).

Every stochastic ingredient of a study (initial perturbations, observation
noise, per-member observation perturbations, member replacement) draws from
its own Philox stream derived from the study seed and a structural key.
Streams are therefore independent of scheduling order, runner count, and
restarts: the same (seed, cycle, member) always yields the same numbers.
"""

import numpy as np

# Stream tags keep the different consumers of (seed, cycle, member) apart.
STREAM_INIT = 0
STREAM_OBS_NOISE = 1
STREAM_OBS_PERTURB = 2
STREAM_REPLACE = 3


def member_rng(seed: int, cycle: int, member_id: int, stream: int = STREAM_OBS_PERTURB) -> np.random.Generator:
    """Return a generator for the stream keyed (seed, cycle, member_id, stream)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(stream, cycle, member_id))
    return np.random.Generator(np.random.Philox(ss))
