"""Kernel dispatch: compiled extension when available, fallback otherwise.

Set TRIALSCREEN_PURE=1 to force the fallback (useful for benchmarking and
for debugging the extension). ``backend_name()`` reports which one is live.
"""

from __future__ import annotations

import os

import numpy as np

from trialscreen import _kernels_py

if os.environ.get("TRIALSCREEN_PURE") == "1":
    _impl = _kernels_py
    _BACKEND = "python"
else:
    try:
        from trialscreen import _kernels as _impl  # type: ignore[no-redef]

        _BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        _BACKEND = "python"


def backend_name() -> str:
    return _BACKEND


def ngram_counts(text: str, dims: int) -> np.ndarray:
    """Signed lowercase character-trigram counts hashed into ``dims`` buckets.

    Texts shorter than three characters produce the all-zero vector.
    """
    buf = text.lower().encode("utf-32-le")
    if len(buf) < 12:
        return np.zeros(dims, dtype=np.int64)
    return np.asarray(_impl.ngram_counts(buf, dims))


def dot_scores(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Row-wise float64 dot products of a float32 matrix with a query."""
    matrix = np.ascontiguousarray(matrix, dtype=np.float32)
    query = np.ascontiguousarray(query, dtype=np.float64)
    if matrix.ndim != 2 or query.ndim != 1 or matrix.shape[1] != query.shape[0]:
        raise ValueError(
            f"shape mismatch: matrix {matrix.shape} vs query {query.shape}"
        )
    if matrix.shape[0] == 0:
        return np.zeros(0, dtype=np.float64)
    return np.asarray(_impl.dot_scores(matrix, query))
