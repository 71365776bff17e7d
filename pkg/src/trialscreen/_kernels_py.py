"""Pure-Python fallback for the hot kernels.

Mirrors trialscreen._kernels exactly: ngram_counts must be bit-identical
(integer hashing), dot_scores may differ from the compiled loop only in
float64 summation order.
"""

from __future__ import annotations

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def ngram_counts(buf: bytes, dims: int) -> np.ndarray:
    """Signed character-trigram counts over a UTF-32LE encoded string.

    Each 12-byte window (three 4-byte code points, stepping one code point)
    is hashed with 64-bit FNV-1a; bit 0 selects the sign, the remaining bits
    select the bucket.
    """
    out = np.zeros(dims, dtype=np.int64)
    n_chars = len(buf) // 4
    for i in range(n_chars - 2):
        h = _FNV_OFFSET
        for b in buf[4 * i : 4 * i + 12]:
            h = ((h ^ b) * _FNV_PRIME) & _MASK64
        bucket = (h >> 1) % dims
        out[bucket] += 1 if (h & 1) else -1
    return out


def dot_scores(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Row-wise dot products of a float32 matrix with a float64 query."""
    if matrix.shape[0] == 0:
        return np.zeros(0, dtype=np.float64)
    return matrix @ query
