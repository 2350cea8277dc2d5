"""Deterministic seed derivation.

Every random stream in the package is derived from one user seed plus a
module name and an integer index, so results never depend on evaluation
order or on how work is split into batches.
"""

import zlib

import numpy as np


def _module_key(module):
    return zlib.crc32(module.encode("utf-8"))


def seed_sequence(seed, module, index=0):
    return np.random.SeedSequence(int(seed), spawn_key=(_module_key(module), int(index)))


def generator(seed, module, index=0):
    """Return a Philox generator keyed by ``(seed, module, index)``."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, module, index)))


def derived_int(seed, module, index=0):
    """A 63-bit integer seed derived from ``(seed, module, index)``."""
    return int(seed_sequence(seed, module, index).generate_state(2, np.uint64)[0] >> np.uint64(1))
