"""SplitMix64, the only randomness source in the package.

Job seeds, clone assignment, latency jitter and lottery seeds all derive from
a scenario seed through ``derive`` so that every run is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

from .encoding import U64_MASK, u64_digest

GOLDEN_GAMMA = 0x9E3779B97F4A7C15


@dataclass(frozen=True)
class PrngState:
    state: int = 0


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & U64_MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & U64_MASK
    return z ^ (z >> 31)


def prng_next(s: PrngState) -> tuple[int, PrngState]:
    state = (s.state + GOLDEN_GAMMA) & U64_MASK
    return _mix(state), PrngState(state)


class SplitMix64:
    """Mutable convenience wrapper around ``prng_next``."""

    def __init__(self, seed: int) -> None:
        self.state = seed & U64_MASK

    def next(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & U64_MASK
        return _mix(self.state)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection, so no modulo bias."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next()
            if x < limit:
                return x % n

    def randint(self, lo: int, hi: int) -> int:
        return lo + self.below(hi - lo + 1)

    def bytes(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            out += self.next().to_bytes(8, "little")
        return bytes(out[:n])

    def sample(self, population, k: int) -> list:
        """k distinct items by partial Fisher-Yates over a sorted copy."""
        pool = sorted(population)
        if k > len(pool):
            raise ValueError("sample larger than population")
        for i in range(k):
            j = i + self.below(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


def derive(seed: int, *labels: str | int) -> int:
    """Child seed for an independent named stream."""
    return u64_digest(seed, *labels)
