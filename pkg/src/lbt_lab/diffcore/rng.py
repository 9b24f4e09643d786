"""Deterministic random streams.

Algorithm (fixed so trajectories are reproducible across implementations):

* The 64-bit seed is expanded into the four words of xoshiro256++ state by
  four successive SplitMix64 outputs.
* Uniform doubles are ``(next_u64() >> 11) * 2**-53`` (in ``[0, 1)``).
* Standard normals use Box-Muller on consecutive uniform pairs
  ``(u1, u2)``: ``r = sqrt(-2 ln(1 - u1))``, yielding ``r cos(2 pi u2)``
  then ``r sin(2 pi u2)``. For an odd count the final sine is discarded.
* Categorical draws compare a uniform against the cumulative weights
  (``searchsorted`` with ``side="right"``).
"""

from __future__ import annotations

import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


@njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def _fill_u64(s, out):
    for i in range(out.shape[0]):
        out[i] = _rotl(s[0] + s[3], 23) + s[0]
        t = s[1] << np.uint64(17)
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)


class Rng:
    """xoshiro256++ stream seeded through SplitMix64."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        sm = self.seed
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        self._state = np.array(words, dtype=np.uint64)

    @property
    def state(self) -> tuple[int, ...]:
        return tuple(int(w) for w in self._state)

    def next_u64(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        if n:
            _fill_u64(self._state, out)
        return out

    def uniform(self, shape) -> np.ndarray:
        shape = _shape(shape)
        n = int(np.prod(shape, dtype=np.int64))
        bits = self.next_u64(n)
        return ((bits >> np.uint64(11)).astype(np.float64) * 2.0 ** -53).reshape(shape)

    def standard_normal(self, shape) -> np.ndarray:
        shape = _shape(shape)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1).reshape(-1)
        return z[:n].reshape(shape)

    def categorical(self, weights, n: int) -> np.ndarray:
        cdf = np.cumsum(np.asarray(weights, dtype=np.float64))
        u = self.uniform(n) * cdf[-1]
        return np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)

    def fork(self) -> "Rng":
        """A new independent stream seeded from this one."""
        return Rng(int(self.next_u64(1)[0]))

    def spawn(self, key: int) -> "Rng":
        """Stream derived from (seed, key) without advancing this stream."""
        _, mixed = splitmix64((self.seed ^ ((int(key) * 0xD1B54A32D192ED03) & MASK64)) & MASK64)
        return Rng(mixed)


def sample_standard_normal(rng: Rng, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _shape(shape) -> tuple:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)
