"""Stable probability transforms, small dense helpers and a seeded PRNG.

Matrices and vectors are plain ``numpy.float64`` arrays. Row-wise transforms
accept either a single vector or a 2-D array (one sample per row).
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Convert ``data`` to a finite 2-D float64 array or raise ``ValueError``."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected 2-D array, got shape {arr.shape}")
    _check_finite(arr, name)
    return arr


def as_vector(data, name: str = "vector") -> np.ndarray:
    """Convert ``data`` to a finite 1-D float64 array or raise ``ValueError``."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name}: expected 1-D array, got shape {arr.shape}")
    _check_finite(arr, name)
    return arr


def _check_finite(arr: np.ndarray, name: str) -> None:
    bad = np.argwhere(~np.isfinite(arr))
    if len(bad):
        raise ValueError(f"{name}: non-finite value at index {tuple(int(i) for i in bad[0])}")


def _nonempty(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[-1] == 0:
        raise ValueError("empty input")
    return v


def log_sum_exp(v) -> np.ndarray | float:
    """``log(sum(exp(v)))`` along the last axis, via max subtraction.

    Returns a float for 1-D input and a per-row array for 2-D input.
    """
    v = _nonempty(v)
    top = np.max(v, axis=-1, keepdims=True)
    out = top + np.log(np.sum(np.exp(v - top), axis=-1, keepdims=True))
    out = out[..., 0]
    return float(out) if out.ndim == 0 else out


def log_softmax(v) -> np.ndarray:
    v = _nonempty(v)
    lse = log_sum_exp(v)
    return v - (np.asarray(lse)[..., None] if v.ndim > 1 else lse)


def softmax(v) -> np.ndarray:
    """Row-wise softmax computed as ``exp(v - log_sum_exp(v))``."""
    return np.exp(log_softmax(v))


def argmax_rows(scores) -> np.ndarray:
    """Per-row argmax; ties go to the lowest index."""
    scores = np.asarray(scores)
    # np.argmax returns the first occurrence, which is the tie rule we want.
    return np.argmax(scores, axis=-1)


def mat_vec(m, v) -> np.ndarray:
    """Matrix-vector product with explicit shape checking."""
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ValueError(f"dimension mismatch: matrix {m.shape} vs vector {v.shape}")
    return m @ v


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step. Returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


_JUMP = (0x180EC6D33CFD0ABA, 0xD5A61266F0C9392C, 0xA9582618E03FC9AA, 0x39ABDC4529B1661C)


class Prng:
    """xoshiro256** seeded through SplitMix64.

    The 256-bit state is filled with four consecutive SplitMix64 outputs of
    the (64-bit reduced) seed. Doubles take the top 53 bits of each output.
    Normals use the Box-Muller cosine branch, consuming two uniforms per draw
    with no cached spare, so the stream position only depends on call count.
    """

    def __init__(self, seed: int = 0):
        sm = int(seed) & _MASK64
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s

    @property
    def state(self) -> tuple[int, int, int, int]:
        return tuple(self._s)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def jump(self) -> None:
        """Advance by 2**128 draws; used to carve non-overlapping substreams."""
        acc = [0, 0, 0, 0]
        for word in _JUMP:
            for b in range(64):
                if word & (1 << b):
                    acc = [a ^ s for a, s in zip(acc, self._s)]
                self.next_u64()
        self._s = acc

    def random(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniform(self, lo: float, hi: float) -> float:
        if not lo < hi:
            raise ValueError(f"uniform requires lo < hi, got lo={lo}, hi={hi}")
        x = lo + (hi - lo) * self.random()
        # rounding can land exactly on hi for wide intervals
        return x if x < hi else math.nextafter(hi, lo)

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        u1 = 1.0 - self.random()  # (0, 1], keeps log finite
        u2 = self.random()
        z = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        return mu + sigma * z

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n < 1:
            raise ValueError(f"randbelow requires n >= 1, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def uniform_array(self, shape, lo: float, hi: float) -> np.ndarray:
        n = int(np.prod(shape))
        return np.array([self.uniform(lo, hi) for _ in range(n)], dtype=np.float64).reshape(shape)

    def normal_array(self, shape, mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        return np.array([self.normal(mu, sigma) for _ in range(n)], dtype=np.float64).reshape(shape)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]
