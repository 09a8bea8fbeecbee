"""Named, independently seedable random streams.

Every stochastic consumer (init, dropout per stack, shuffling, synthetic
data) draws from its own stream, keyed by a stable name. Removing every
draw from one stream leaves all other streams bit-identical, which is what
makes "skip the decoder entirely" equivalent to "never had a decoder".
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Fresh generator for one named consumer under a master seed."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    )


class RngPool:
    """Lazily built cache of named streams sharing one master seed.

    Streams are stateful: repeated get() calls return the same generator,
    so successive draws advance that stream and only that stream.
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            gen = stream(self.seed, name)
            self._streams[name] = gen
        return gen
