"""
Seeded random streams.

All randomness goes through NumPy's Philox counter-based generator. A run seed
plus a named stream id is expanded with SeedSequence, so two consumers of the
same seed (say the ID and the OOD generator) never share draws.
"""

import numpy as np

MASK64 = (1 << 64) - 1
SPLITMIX_GAMMA = 0x9E3779B97F4A7C15

# Fixed ids; never renumber, seeds would stop reproducing
STREAMS = {
    "prototypes": 1,
    "id": 2,
    "ood": 3,
    "split": 4,
    "init": 5,
    "shuffle": 6,
    "iforest": 7,
    "noise": 8,
    "pairs": 9,
}


def make_rng(seed, stream):
    """Philox generator for (`seed`, `stream`)."""
    if stream not in STREAMS:
        raise KeyError(f"unknown random stream {stream!r}")
    seq = np.random.SeedSequence([int(seed) & MASK64, STREAMS[stream]])
    return np.random.Generator(np.random.Philox(seq))


def splitmix64(state):
    """One splitmix64 output for the 64-bit `state` (after adding the gamma)."""
    z = (state + SPLITMIX_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master, index):
    """Independent child seed number `index` of `master`."""
    return splitmix64((int(master) + int(index) * SPLITMIX_GAMMA) & MASK64)
