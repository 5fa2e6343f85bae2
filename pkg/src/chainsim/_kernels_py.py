"""Pure-Python kernels for the simulator's hot inner math.

Counter-based 64-bit RNG (splitmix64 finalizer) plus the per-packet sampling
loops built on it. The Cython twin in `_kernels_c.pyx` implements the same
functions with identical bit-level results; `kernels.py` picks one at import.

All arithmetic is masked 64-bit integer math so results are identical across
platforms and across the two backends.
"""

MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

BACKEND = "python"


def mix64(x: int) -> int:
    """splitmix64 finalizer."""
    z = (x + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & MASK64
    return h


def draw_u64(key: int, counter: int) -> int:
    """The counter-th draw of the stream identified by key."""
    return mix64((key + counter * _GOLDEN) & MASK64)


def bernoulli_count(key: int, counter: int, n: int, threshold: int) -> int:
    """Number of successes among n Bernoulli draws (draw < threshold).

    Consumes counters [counter, counter + n).
    """
    hits = 0
    for i in range(n):
        if mix64((key + (counter + i) * _GOLDEN) & MASK64) < threshold:
            hits += 1
    return hits


def geometric_attempts(key: int, counter: int, fail_threshold: int,
                       max_attempts: int) -> int:
    """Failures before the first success, capped.

    Each draw fails when draw < fail_threshold. Returns k in [0, max_attempts]:
    k < max_attempts means success after k failures; k == max_attempts means
    every allowed attempt failed. Consumes k+1 draws (or max_attempts on cap).
    """
    for k in range(max_attempts):
        if mix64((key + (counter + k) * _GOLDEN) & MASK64) >= fail_threshold:
            return k
    return max_attempts
