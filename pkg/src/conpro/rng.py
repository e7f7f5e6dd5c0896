"""Deterministic random source used by every sampling and init path.

The generator is xoshiro256** seeded through splitmix64. Both algorithms
are fixed by our reproducibility contract: a single 64-bit seed must
reproduce datasets, pair lists, and weight draws bit-for-bit, and the
four-word generator state must round-trip through checkpoints.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def splitmix64_next(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state once; returns (new_state, output word)."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return state, z ^ (z >> 31)


def derive_seed(base: int, *tags: str | int) -> int:
    """Derive an independent child seed from a base seed and purpose tags.

    Tags are hashed with FNV-1a and the result is whitened through one
    splitmix64 step, so streams for different purposes ("init", "gen",
    ("epoch", 3), ...) never overlap by construction.
    """
    h = _FNV_OFFSET
    for tag in tags:
        if isinstance(tag, str):
            raw = tag.encode("utf-8")
        else:
            raw = int(tag).to_bytes(8, "little", signed=True)
        for byte in raw:
            h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    _, mixed = splitmix64_next((base ^ h) & _MASK64)
    return mixed


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256:
    """xoshiro256** stream with helpers for uniforms, ints, and shuffles.

    State is four 64-bit words, exposed via ``state`` for checkpointing
    and restored with ``from_state``.
    """

    __slots__ = ("_s",)

    def __init__(self, seed: int):
        sm = seed & _MASK64
        words = []
        for _ in range(4):
            sm, w = splitmix64_next(sm)
            words.append(w)
        self._s = words

    @classmethod
    def from_state(cls, state: tuple[int, int, int, int]) -> "Xoshiro256":
        if len(state) != 4:
            raise ValueError("xoshiro256 state must have exactly 4 words")
        rng = cls(0)
        rng._s = [int(w) & _MASK64 for w in state]
        return rng

    @property
    def state(self) -> tuple[int, int, int, int]:
        return tuple(self._s)

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def below(self, n: int) -> int:
        """Uniform integer in [0, n). Modulo bias is negligible for n << 2^64."""
        if n <= 0:
            raise ValueError(f"below() needs n >= 1, got {n}")
        return self.next_u64() % n

    def int_range(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]."""
        if hi < lo:
            raise ValueError(f"empty integer range [{lo}, {hi}]")
        return lo + self.below(hi - lo + 1)

    def gauss(self) -> float:
        """Standard normal via Box-Muller; always consumes two uniforms."""
        u1 = 1.0 - self.uniform()  # (0, 1], keeps log() finite
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def choose(self, items, k: int) -> list:
        """k independent draws from items, with replacement."""
        n = len(items)
        if n == 0:
            raise ValueError("cannot choose from an empty sequence")
        return [items[self.below(n)] for _ in range(k)]

    def sample(self, items, k: int) -> list:
        """k draws without replacement (partial Fisher-Yates)."""
        n = len(items)
        if not 0 <= k <= n:
            raise ValueError(f"cannot sample {k} from {n} items without replacement")
        pool = list(items)
        for i in range(k):
            j = i + self.below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]
