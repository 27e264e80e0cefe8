"""Counter-based deterministic random number generation.

Every draw is a pure function of ``(seed, counter)``, so a stream can be
resumed from any point and two states with equal fields produce bit-identical
samples on every platform.  The generator is SplitMix64 applied to the
running counter, with Box-Muller for gaussians.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer over an array of uint64 counters."""
    z = (x + _GOLDEN) & _U64_MASK
    z = ((z ^ (z >> np.uint64(30))) * _MIX1) & _U64_MASK
    z = ((z ^ (z >> np.uint64(27))) * _MIX2) & _U64_MASK
    return z ^ (z >> np.uint64(31))


@dataclass
class RngState:
    """Resumable RNG position: a 64-bit seed and a 64-bit draw counter."""

    seed: int
    counter: int = 0

    def _next_u64(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            idx = (np.uint64(self.counter) + np.arange(n, dtype=np.uint64)) & _U64_MASK
            out = _splitmix64((np.uint64(self.seed) ^ _GOLDEN) + idx * _GOLDEN)
        self.counter = (self.counter + n) & 0xFFFFFFFFFFFFFFFF
        return out

    def uniform(self, n: int) -> np.ndarray:
        """n doubles uniform on [0, 1)."""
        return (self._next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        """Standard-normal samples of the given shape, scaled by ``std``."""
        size = int(np.prod(shape)) if shape else 1
        pairs = (size + 1) // 2
        raw = self._next_u64(2 * pairs)
        # u1 in (0, 1] so log never sees zero
        u1 = ((raw[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[pairs:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:size]
        return (std * z).reshape(shape)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """n integers uniform on [low, high)."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        span = high - low
        return low + (self.uniform(n) * span).astype(np.int64)

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), order randomized."""
        if k > n:
            raise ValueError(f"cannot choose {k} distinct values from {n}")
        keys = self.uniform(n)
        return np.argsort(keys, kind="stable")[:k]

    def derive(self, label: str) -> "RngState":
        """Independent substream keyed by a label; does not advance self."""
        digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
        sub = int.from_bytes(digest, "little") ^ self.seed
        return RngState(seed=sub & 0xFFFFFFFFFFFFFFFF, counter=0)
