"""Exact, patient-mapped vector index.

Entries are laid out contiguously per patient so a query scans only that
patient's slice; retrieval is an exact scan, never approximate. The on-disk
format is binary with a trailing sha256 so corruption is detected before
any partial index escapes.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from typing import Iterable

import numpy as np

from trialscreen import kernels
from trialscreen.embedding import EmbeddingVector
from trialscreen.errors import FormatError, StaleIndexError, ValidationError

MAGIC = b"TSIX1"
SCORE_EPS = 1e-9


class RetrievalHit:
    """One scored retrieval result; rank is 1-based."""

    __slots__ = ("chunk_id", "patient_id", "score", "rank")

    def __init__(self, chunk_id: str, patient_id: str, score: float, rank: int):
        self.chunk_id = chunk_id
        self.patient_id = patient_id
        self.score = score
        self.rank = rank

    def __repr__(self):
        return (
            f"RetrievalHit(rank={self.rank}, chunk_id={self.chunk_id!r}, "
            f"score={self.score:.6f})"
        )

    def __eq__(self, other):
        if not isinstance(other, RetrievalHit):
            return NotImplemented
        return (
            self.chunk_id == other.chunk_id
            and self.patient_id == other.patient_id
            and self.score == other.score
            and self.rank == other.rank
        )


class VectorIndex:
    """Immutable after build; safe for unrestricted concurrent retrieval."""

    def __init__(
        self,
        dims: int,
        chunk_ids: list[str],
        patient_ids: list[str],
        matrix: np.ndarray,
        patient_offsets: dict[str, tuple[int, int]],
        metadata: dict,
    ):
        self.dims = dims
        self.chunk_ids = chunk_ids
        self.patient_ids = patient_ids
        self.matrix = matrix
        self.matrix.setflags(write=False)
        self.patient_offsets = patient_offsets
        self.metadata = metadata

    def __len__(self) -> int:
        return len(self.chunk_ids)

    def has_patient(self, patient_id: str) -> bool:
        return patient_id in self.patient_offsets


def build_index(
    entries: Iterable[tuple[str, str]],
    vectors: Iterable[EmbeddingVector],
    metadata: dict,
) -> VectorIndex:
    """Build an index from (chunk_id, patient_id) pairs and their vectors.

    Entries are grouped contiguously by patient and ordered by chunk_id
    within each patient, which makes the retrieval tie-break (score desc,
    chunk_id asc) a positional rule.
    """
    entries = list(entries)
    vectors = list(vectors)
    if len(entries) != len(vectors):
        raise ValidationError(
            f"{len(entries)} entries but {len(vectors)} vectors"
        )
    if not metadata.get("embedder_fingerprint") or not metadata.get(
        "chunk_fingerprint"
    ):
        raise ValidationError(
            "index metadata requires non-empty embedder_fingerprint and "
            "chunk_fingerprint"
        )
    metadata = dict(metadata)
    metadata.setdefault("built_at", time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()))

    dims: int | None = None
    for vec in vectors:
        if dims is None:
            dims = vec.dims
        elif vec.dims != dims:
            raise ValidationError(f"dims mismatch: {vec.dims} vs {dims}")
    if dims is None:
        dims = int(metadata.get("dims", 0)) or 1

    seen: set[str] = set()
    for chunk_id, _pid in entries:
        if chunk_id in seen:
            raise ValidationError(f"duplicate chunk_id: {chunk_id!r}")
        seen.add(chunk_id)

    order = sorted(range(len(entries)), key=lambda i: (entries[i][1], entries[i][0]))
    chunk_ids = [entries[i][0] for i in order]
    patient_ids = [entries[i][1] for i in order]
    matrix = np.zeros((len(order), dims), dtype=np.float32)
    for row, i in enumerate(order):
        matrix[row] = vectors[i].values

    offsets: dict[str, tuple[int, int]] = {}
    start = 0
    for row in range(1, len(patient_ids) + 1):
        if row == len(patient_ids) or patient_ids[row] != patient_ids[start]:
            offsets[patient_ids[start]] = (start, row)
            start = row
    return VectorIndex(dims, chunk_ids, patient_ids, matrix, offsets, metadata)


def retrieve(
    index: VectorIndex,
    query: EmbeddingVector,
    patient_id: str,
    k: int,
) -> list[RetrievalHit]:
    """Top-k hits for one patient, sorted by (score desc, chunk_id asc).

    An unknown patient yields an empty list, not an error; dims mismatches
    raise. Scans only the patient's contiguous slice.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if query.dims != index.dims:
        raise ValueError(f"query dims {query.dims} != index dims {index.dims}")
    span = index.patient_offsets.get(patient_id)
    if span is None or k == 0:
        return []
    start, end = span
    scores = kernels.dot_scores(
        index.matrix[start:end], query.values.astype(np.float64)
    )
    # Stable sort on negated scores: ties keep slice order, which is
    # chunk_id order by construction.
    top = np.argsort(-scores, kind="stable")[:k]
    return [
        RetrievalHit(
            chunk_id=index.chunk_ids[start + int(i)],
            patient_id=patient_id,
            score=float(scores[int(i)]),
            rank=rank,
        )
        for rank, i in enumerate(top, start=1)
    ]


def _check_fingerprints(metadata: dict, expected: dict | None, force: bool) -> None:
    if not expected or force:
        return
    for key, want in expected.items():
        got = metadata.get(key)
        if got != want:
            raise StaleIndexError(
                f"index is stale: {key} is {got!r}, current config wants {want!r} "
                f"(pass force=True / --force-stale-index to override)"
            )


def save_index(index: VectorIndex, path) -> None:
    meta_bytes = json.dumps(index.metadata, sort_keys=True).encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<I", index.dims),
        struct.pack("<Q", len(index)),
        struct.pack("<I", len(meta_bytes)),
        meta_bytes,
    ]
    for row in range(len(index)):
        cid = index.chunk_ids[row].encode("utf-8")
        pid = index.patient_ids[row].encode("utf-8")
        parts.append(struct.pack("<H", len(cid)))
        parts.append(cid)
        parts.append(struct.pack("<H", len(pid)))
        parts.append(pid)
        parts.append(index.matrix[row].astype("<f4").tobytes())
    payload = b"".join(parts)
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(digest)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated index file: wanted {n} bytes at offset {self.pos}, "
                f"only {len(self.data) - self.pos} remain"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def load_index(path, expected_fingerprints: dict | None = None,
               force: bool = False) -> VectorIndex:
    """Load a persisted index, verifying integrity and fingerprints.

    ``expected_fingerprints`` maps metadata keys (embedder_fingerprint,
    chunk_fingerprint, ...) to the values the current configuration
    requires; a mismatch raises StaleIndexError unless ``force``.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 32:
        raise FormatError("index file too short")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise FormatError("index file integrity check failed (corrupt or truncated)")
    r = _Reader(payload)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("bad magic: not an index file")
    dims = struct.unpack("<I", r.take(4))[0]
    count = struct.unpack("<Q", r.take(8))[0]
    meta_len = struct.unpack("<I", r.take(4))[0]
    try:
        metadata = json.loads(r.take(meta_len).decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"bad metadata JSON: {exc}") from exc
    _check_fingerprints(metadata, expected_fingerprints, force)

    chunk_ids: list[str] = []
    patient_ids: list[str] = []
    matrix = np.zeros((count, dims), dtype=np.float32)
    for row in range(count):
        cid_len = struct.unpack("<H", r.take(2))[0]
        chunk_ids.append(r.take(cid_len).decode("utf-8"))
        pid_len = struct.unpack("<H", r.take(2))[0]
        patient_ids.append(r.take(pid_len).decode("utf-8"))
        matrix[row] = np.frombuffer(r.take(4 * dims), dtype="<f4")
    if r.pos != len(payload):
        raise FormatError(f"{len(payload) - r.pos} trailing bytes after records")

    offsets: dict[str, tuple[int, int]] = {}
    start = 0
    for row in range(1, count + 1):
        if row == count or patient_ids[row] != patient_ids[start]:
            if patient_ids[start] in offsets:
                raise FormatError(
                    f"patient {patient_ids[start]!r} entries are not contiguous"
                )
            offsets[patient_ids[start]] = (start, row)
            start = row
    return VectorIndex(dims, chunk_ids, patient_ids, matrix, offsets, metadata)
