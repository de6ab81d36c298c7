"""Deterministic, label-scoped random streams.

Every stochastic component draws from its own generator derived from
(master seed, component label), so adding or removing one component never
shifts the randomness seen by the others.
"""

import zlib

import numpy as np


def stream(seed, label):
    """Independent Generator for a named component under a master seed."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode())])
    return np.random.default_rng(ss)
