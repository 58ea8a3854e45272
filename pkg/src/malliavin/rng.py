"""Counter-based random number streams.

All Monte Carlo in this package draws from Philox sub-streams derived from a
single master seed.  A sub-stream is addressed by up to three integer indices
placed in the high words of the 256-bit Philox counter, so distinct streams
never overlap and parallel workers can sample independently without shared
state.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def substream(seed: int, *stream: int) -> np.random.Generator:
    """Return the generator for sub-stream ``stream`` of the given master seed.

    The same (seed, stream) pair always yields an identical sequence; streams
    with different indices are statistically independent.
    """
    if len(stream) > 3:
        raise ValueError("at most three stream indices are supported")
    counter = 0
    for level, index in enumerate(stream):
        if index < 0:
            raise ValueError("stream indices must be non-negative")
        counter |= (index & _MASK64) << (64 * (3 - level))
    bitgen = np.random.Philox(key=seed & _MASK64, counter=counter)
    return np.random.Generator(bitgen)
