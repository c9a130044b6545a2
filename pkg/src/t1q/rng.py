"""Keyed, splittable random streams.

Every random draw in the package comes from ``stream(seed, purpose, *index)``:
a Philox counter-based generator whose key is derived from the base seed, a
purpose string (e.g. ``"init"``, ``"dropout"``, ``"augment"``) and any number
of integer or string indices. Streams for different keys are independent, so
results never depend on the order in which work is scheduled.
"""
import zlib

import numpy as np


def _word(x):
    if isinstance(x, (bytes, str)):
        data = x.encode() if isinstance(x, str) else x
        return zlib.crc32(data)
    x = int(x)
    if x < 0:
        raise ValueError(f"stream index must be non-negative, got {x}")
    return x


def stream(seed, purpose, *index):
    entropy = [_word(seed), _word(purpose), len(index)] + [_word(i) for i in index]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
