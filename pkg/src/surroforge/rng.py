"""Counter-based SplitMix64 random streams.

Every draw is a pure function of ``(key, counter)``::

    z = key + GAMMA * (counter + 1)          (mod 2**64)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)

Uniforms take the top 53 bits (``out >> 11``) scaled by 2**-53. Normals use
Box-Muller on consecutive uniform pairs ``(u1, u2)`` with ``u1`` mapped to
``(0, 1]``; the cosine branch is used for even outputs and the sine branch for
odd ones. Named sub-streams derive their key as ``mix(key ^ fnv1a64(name))``.
"""

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MUL1 = 0xBF58476D1CE4E5B9
MUL2 = 0x94D049BB133111EB
MASK64 = (1 << 64) - 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(z):
    """SplitMix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * MUL1) & MASK64
    z = ((z ^ (z >> 27)) * MUL2) & MASK64
    return z ^ (z >> 31)


def _mix_array(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MUL1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MUL2)
    return z ^ (z >> np.uint64(31))


def splitmix_at(key, index):
    """Output number ``index`` (0-based) of the SplitMix64 sequence seeded with ``key``."""
    return mix64((key + GAMMA * (index + 1)) & MASK64)


def _fnv1a64(text):
    h = _FNV_OFFSET
    for b in text.encode("utf-8"):
        h = ((h ^ b) * _FNV_PRIME) & MASK64
    return h


class CounterRNG:
    """Stateless-by-construction generator; the only state is a draw counter."""

    def __init__(self, seed):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.key = int(seed) & MASK64
        self.counter = 0

    def child(self, name):
        """Independent stream keyed by ``name``; does not advance this stream."""
        return CounterRNG(mix64(self.key ^ _fnv1a64(str(name))))

    def raw(self, n):
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + np.uint64(GAMMA) * idx
            return _mix_array(z)

    def uniform(self, n, low=0.0, high=1.0):
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * u

    def normal(self, n, mean=0.0, std=1.0):
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        radius = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = radius * np.cos(2.0 * np.pi * u2)
        z[1::2] = radius * np.sin(2.0 * np.pi * u2)
        return mean + std * z[:n]

    def permutation(self, n):
        """Stable argsort of uniform keys: a seeded shuffle of ``range(n)``."""
        return np.argsort(self.uniform(n), kind="stable")
