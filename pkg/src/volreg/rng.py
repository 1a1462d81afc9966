"""Deterministic pseudo-random primitives.

Every seeded feature of this package draws from SplitMix64 rather than
numpy's generators, so that seeded outputs are stable across platforms and
numpy versions.  The generator is fully specified here: the state advances
by the 64-bit golden-ratio increment and the output is mixed by two
xor-shift-multiply rounds (splitmix64).
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


class SplitMix64:
    """splitmix64 stream: state += 0x9E3779B97F4A7C15, output = mix(state)."""

    __slots__ = ("state",)

    def __init__(self, seed: int) -> None:
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Float in [0, 1) built from the top 53 bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform_array(self, count: int) -> np.ndarray:
        """Vectorized batch of `count` uniforms, identical to the stream of
        `count` sequential uniform() calls.  splitmix's counter form makes
        this exact: the i-th output mixes state + i*gamma."""
        steps = np.arange(1, count + 1, dtype=np.uint64)
        z = steps * np.uint64(_GAMMA) + np.uint64(self.state)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
        self.state = (self.state + count * _GAMMA) & _MASK
        return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform_in(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def randint(self, n: int) -> int:
        """Integer in [0, n).  Modulo bias is < n / 2**64, negligible here."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        return self.next_u64() % n

    def unit_vector(self) -> tuple[float, float, float]:
        """Uniform direction on the sphere via cube rejection (no trig)."""
        while True:
            x = 2.0 * self.uniform() - 1.0
            y = 2.0 * self.uniform() - 1.0
            z = 2.0 * self.uniform() - 1.0
            n2 = x * x + y * y + z * z
            if 1e-8 < n2 <= 1.0:
                inv = 1.0 / math.sqrt(n2)
                return (x * inv, y * inv, z * inv)


def derive_seed(base: int, *salts: int) -> int:
    """Fold integer salts into a base seed to get independent sub-streams."""
    x = base & _MASK
    for s in salts:
        x = SplitMix64(x ^ ((s * _GAMMA) & _MASK)).next_u64()
    return x
