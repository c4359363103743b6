"""SplitMix64 stream with a Box-Muller Gaussian transform.

The stream is fully specified so parameter initializations and synthetic
datasets are reproducible from a seed alone.
"""
from __future__ import annotations

import numpy as np

from . import _kernels

_MASK = (1 << 64) - 1


class SplitMix64:
    """Sequential generator; normals are emitted in Box-Muller pairs (cos, sin)."""

    def __init__(self, seed: int):
        self.state = np.uint64(int(seed) & _MASK)
        self._spare: list[float] = []

    def words(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        self.state = np.uint64(_kernels.splitmix64_fill(self.state, out))
        return out

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits of each word."""
        return (self.words(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def normal(self, n: int) -> np.ndarray:
        out = np.empty(n)
        have = min(len(self._spare), n)
        out[:have] = self._spare[:have]
        del self._spare[:have]
        rest = n - have
        if rest:
            pairs = (rest + 1) // 2
            draws = np.empty(2 * pairs)
            _kernels.box_muller_fill(self.words(2 * pairs), draws)
            out[have:] = draws[:rest]
            self._spare.extend(draws[rest:].tolist())
        return out


def splitmix64_reference(seed: int, n: int) -> list[int]:
    """Pure-Python SplitMix64, kept as an independent check on the kernel."""
    s = seed & _MASK
    out = []
    for _ in range(n):
        s = (s + 0x9E3779B97F4A7C15) & _MASK
        z = s
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        out.append(z ^ (z >> 31))
    return out
