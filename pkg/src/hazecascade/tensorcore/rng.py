"""SplitMix64 pseudo-random stream.

Output ``n`` (1-based) of a stream seeded with ``s`` is ``mix(s + n * GAMMA)``, so
blocks of draws can be produced with vectorised uint64 arithmetic and still
match the scalar sequence exactly.
"""

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _mix(z):
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def splitmix64(x):
    """First output of a SplitMix64 stream seeded with ``x``."""
    return _mix((x + GAMMA) & MASK64)


def _mix_array(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


class Rng:
    def __init__(self, seed):
        self.state = int(seed) & MASK64

    def next_u64(self):
        self.state = (self.state + GAMMA) & MASK64
        return _mix(self.state)

    def u64_array(self, n):
        n = int(n)
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + idx * np.uint64(GAMMA)
            out = _mix_array(z)
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def random(self, size=None):
        """Uniform doubles in [0, 1) built from the top 53 bits."""
        if size is None:
            return (self.next_u64() >> 11) * 2.0**-53
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        bits = self.u64_array(n) >> np.uint64(11)
        return (bits.astype(np.float64) * 2.0**-53).reshape(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return low + (high - low) * self.random(size)

    def integers(self, low, high):
        """Integer in [low, high); the multiply-shift keeps bias below 2**-53 for small spans."""
        span = int(high) - int(low)
        if span <= 0:
            raise ValueError("empty integer range")
        return int(low) + ((self.next_u64() * span) >> 64)

    def shuffle(self, items):
        """In-place Fisher-Yates shuffle; returns ``items`` for chaining."""
        for i in range(len(items) - 1, 0, -1):
            j = self.integers(0, i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def child(self, index):
        return Rng(splitmix64(self.state ^ (int(index) & MASK64)))
