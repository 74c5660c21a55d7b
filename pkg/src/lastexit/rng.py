"""Counter-based random streams keyed by ``(seed, stream_id)``."""

from __future__ import annotations

import numpy as np

_U64 = 1 << 64


class RngStream:
    """Reproducible random stream.

    Wraps a Philox generator keyed by the pair ``(seed, stream_id)``. Two
    instances with the same pair produce bit-identical output, independent
    of process or thread layout, and no serial generation is needed to
    reach a given stream.

    Parameters
    ----------
    seed : int
        Non-negative 64-bit integer.
    stream_id : int
        Non-negative 64-bit integer, typically the replication index.
    """

    __slots__ = ("seed", "stream_id", "gen")

    def __init__(self, seed: int, stream_id: int = 0):
        seed = int(seed)
        stream_id = int(stream_id)
        if not (0 <= seed < _U64 and 0 <= stream_id < _U64):
            raise ValueError("seed and stream_id must be in [0, 2**64)")
        self.seed = seed
        self.stream_id = stream_id
        key = np.array([seed, stream_id], dtype=np.uint64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def exponential(self, size=None):
        return self.gen.standard_exponential(size)

    def uniform(self, size=None):
        return self.gen.random(size)


def as_stream(rng) -> RngStream:
    """Accept an ``RngStream`` or an int seed."""
    if isinstance(rng, RngStream):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng), 0)
    raise TypeError(f"expected RngStream or int seed, got {type(rng).__name__}")
