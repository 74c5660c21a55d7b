import numpy as np
import pytest

from lastexit.rng import RngStream


@pytest.fixture
def rng():
    return RngStream(12345, 0)


def stream_iter(seed, count):
    """Independent streams ``(seed, 0), (seed, 1), ...``."""
    return (RngStream(seed, i) for i in range(count))


def se_mean(v):
    v = np.asarray(v, dtype=float)
    return v.std(ddof=1) / np.sqrt(v.size)
