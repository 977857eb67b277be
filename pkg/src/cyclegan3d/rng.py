"""Seeded, counter-based random streams (Philox) with keyed substreams."""
import numpy as np


class Rng:
    """A 64-bit seed plus a key path naming an independent Philox stream.

    ``Rng(7).spawn("epoch", 3)`` always yields the same stream, regardless of
    how many samples were drawn from the parent, which is what makes resumed
    training continue bitwise.
    """

    def __init__(self, seed, key=()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(key)
        words = [self.seed & 0xFFFFFFFF, self.seed >> 32] + [_word(k) for k in self.key]
        self.generator = np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))

    def spawn(self, *key):
        return Rng(self.seed, self.key + key)

    def normal(self, scale, shape, dtype=np.float64):
        return (self.generator.standard_normal(shape, dtype=np.float64) * scale).astype(dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def state(self):
        return {"seed": self.seed, "key": [str(k) for k in self.key],
                "bit_generator": self.generator.bit_generator.state}

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key})"


def _word(k):
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFF
    # stable string hash (Python's hash() is salted per process)
    h = 2166136261
    for ch in str(k).encode():
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h
