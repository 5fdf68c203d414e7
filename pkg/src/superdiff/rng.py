"""Counter-based random streams (Philox4x32-10) vectorized over numpy arrays.

A draw is a pure function of ``(seed, tag, sample, step, block)``. Per-sample
noise therefore does not depend on how samples are batched or scheduled.
"""

from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)

# stream tags
TAG_INIT = 0
TAG_DW = 1
TAG_PROBE = 2
TAG_CHOICE = 3


def philox4x32(counter, key, rounds: int = 10):
    """Philox4x32 block function.

    ``counter`` is a sequence of four uint32-valued arrays (broadcastable),
    ``key`` a pair of uint32 scalars. Returns four uint32 arrays (as uint64).
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK32 for c in counter)
    k0 = np.uint64(int(key[0]) & 0xFFFFFFFF)
    k1 = np.uint64(int(key[1]) & 0xFFFFFFFF)
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & _MASK32
            k1 = (k1 + _W1) & _MASK32
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> _SHIFT32, p0 & _MASK32
        hi1, lo1 = p1 >> _SHIFT32, p1 & _MASK32
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


def _split_seed(seed: int) -> tuple[int, int]:
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed & 0xFFFFFFFF, seed >> 32


def _uniform53(hi, lo):
    # (0, 1]: never zero, safe for log in Box-Muller
    bits = (hi << np.uint64(21)) ^ (lo >> np.uint64(11))
    return ((bits & np.uint64((1 << 53) - 1)).astype(np.float64) + 1.0) * 2.0**-53


class CounterRNG:
    """Splittable stream family keyed by a 64-bit seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._key = _split_seed(seed)

    def _blocks(self, samples, step: int, nblocks: int, tag: int):
        samples = np.asarray(samples, dtype=np.uint64).reshape(-1, 1)
        blocks = np.arange(nblocks, dtype=np.uint64).reshape(1, -1)
        hi = (samples >> _SHIFT32) ^ (np.uint64(tag) << np.uint64(24))
        return samples.shape[0], philox4x32(
            (blocks, np.full_like(blocks, np.uint64(step)), samples & _MASK32, hi), self._key)

    def uniform_pairs(self, samples, step: int, nblocks: int, tag: int):
        n, (r0, r1, r2, r3) = self._blocks(samples, step, nblocks, tag)
        return n, _uniform53(r0, r1), _uniform53(r2, r3)

    def uniform(self, samples, step: int, dim: int, tag: int) -> np.ndarray:
        """Uniforms on (0, 1] of shape ``(len(samples), dim)``."""
        n, u1, u2 = self.uniform_pairs(samples, step, (dim + 1) // 2, tag)
        return np.stack([u1, u2], axis=-1).reshape(n, -1)[:, :dim]

    def normal(self, samples, step: int, dim: int, tag: int = TAG_DW) -> np.ndarray:
        """Standard normals of shape ``(len(samples), dim)``.

        Row ``i`` depends only on ``(seed, tag, samples[i], step)``.
        """
        nblocks = (dim + 1) // 2
        n, u1, u2 = self.uniform_pairs(samples, step, nblocks, tag)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=-1)
        return z.reshape(n, 2 * nblocks)[:, :dim]

    def rademacher(self, samples, step: int, dim: int, tag: int = TAG_PROBE) -> np.ndarray:
        n, out = self._blocks(samples, step, (dim + 3) // 4, tag)
        bits = np.stack(out, axis=-1).reshape(n, -1)[:, :dim]
        return np.where(bits & np.uint64(1), 1.0, -1.0)

    def generator(self, *path: int) -> np.random.Generator:
        """A numpy Generator for bulk sequential use, derived from the seed and ``path``."""
        return np.random.Generator(np.random.Philox(np.random.SeedSequence([*self._key, *path])))
