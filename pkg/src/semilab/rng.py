"""Counter-based random number streams.

Every stochastic routine in the package draws from a Philox generator keyed
by ``(seed, stream)``.  Distinct stream indices give statistically
independent streams without shared state, so parallel callers never
contend and a run is reproducible from its root seed alone.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def make_generator(seed: int, stream: int = 0) -> np.random.Generator:
    """Return the Philox generator for ``(seed, stream)``.

    Identical arguments always yield a generator producing bit-identical
    output.
    """
    key = np.array([int(seed) & _MASK64, int(stream) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def substream(stream: int, index: int) -> int:
    """Derive a child stream index, spread across the 64-bit stream space."""
    return (int(stream) * 0x9E3779B97F4A7C15 + int(index) + 1) & _MASK64
