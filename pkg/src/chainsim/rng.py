"""Seeded randomness as independent counter-based streams.

Every consumer gets its own stream keyed by (root seed, label, indices), so a
draw in one stream never perturbs any other -- toggling an attack cannot shift
unrelated randomness. Streams are cheap value objects; creating the same
(label, indices) twice yields the same draw sequence.
"""

from __future__ import annotations

from chainsim import kernels

TWO64 = 1 << 64


def p_to_threshold(p: float) -> int:
    """Map probability p in [0, 1) to a u64 comparison threshold."""
    if p <= 0.0:
        return 0
    if p >= 1.0:
        raise ValueError("p must be < 1 (handle certainties without a draw)")
    return int(p * TWO64)


class Stream:
    """One reproducible draw sequence."""

    __slots__ = ("key", "counter")

    def __init__(self, key: int, counter: int = 0):
        self.key = key
        self.counter = counter

    def u64(self) -> int:
        v = kernels.draw_u64(self.key, self.counter)
        self.counter += 1
        return v

    def bernoulli(self, threshold: int) -> bool:
        return self.u64() < threshold

    def randrange(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError("empty range")
        limit = TWO64 - (TWO64 % n)
        while True:
            v = self.u64()
            if v < limit:
                return v % n

    def choice(self, seq):
        return seq[self.randrange(len(seq))]

    def shuffle(self, items: list) -> list:
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def sample(self, population, k: int) -> list:
        """k distinct elements, order randomized (partial Fisher-Yates)."""
        pool = list(population)
        if k > len(pool):
            raise ValueError("sample larger than population")
        for i in range(k):
            j = i + self.randrange(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def weighted_index(self, weights) -> int:
        """Index drawn proportionally to integer weights."""
        total = 0
        cum = []
        for w in weights:
            total += w
            cum.append(total)
        if total <= 0:
            raise ValueError("weights sum to zero")
        v = self.randrange(total)
        for i, c in enumerate(cum):
            if v < c:
                return i
        raise AssertionError("unreachable")


class RngFactory:
    """Derives named streams from one root seed."""

    def __init__(self, root_seed: int):
        self.root_seed = root_seed & kernels.MASK64

    def key(self, label: str, *indices: int) -> int:
        k = kernels.mix64(self.root_seed ^ kernels.fnv1a(label.encode()))
        for idx in indices:
            k = kernels.mix64(k ^ (idx & kernels.MASK64))
        return k

    def stream(self, label: str, *indices: int) -> Stream:
        return Stream(self.key(label, *indices))
