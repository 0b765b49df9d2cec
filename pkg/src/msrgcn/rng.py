"""Seeded random streams.

Every stream is a Philox (64-bit counter-based) generator keyed by
``SeedSequence([seed, stream, *extra])``; the output is identical on every
platform numpy supports. Streams never share state, so adding draws to one
cannot shift another.
"""

import numpy as np

DATA = 0
BASIS = 1
INIT = 2
SHUFFLE = 3
FOLDS = 4


def stream(seed: int, stream_id: int, *extra: int) -> np.random.Generator:
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, stream_id, *extra])
    return np.random.Generator(np.random.Philox(seq))
