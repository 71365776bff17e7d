"""Dense text embeddings behind pluggable backends.

Two backends: a remote HTTP embedding service (the production path) and a
deterministic hashed character-ngram embedding for fully offline runs and
tests. Vectors are L2-normalized at construction so downstream similarity
is a plain dot product.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import requests

from trialscreen import kernels
from trialscreen.errors import BackendError

NORM_TOLERANCE = 1e-6


class EmbeddingVector:
    """Unit-norm float32 vector. Construct via ``from_raw`` to normalize."""

    __slots__ = ("values",)

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float32)
        if values.ndim != 1:
            raise ValueError(f"expected a 1-d vector, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("vector contains non-finite values")
        norm = float(np.linalg.norm(values.astype(np.float64)))
        if abs(norm - 1.0) > NORM_TOLERANCE:
            raise ValueError(f"vector is not unit-norm (|v| = {norm!r})")
        self.values = values
        self.values.setflags(write=False)

    @property
    def dims(self) -> int:
        return int(self.values.shape[0])

    @classmethod
    def from_raw(cls, values) -> "EmbeddingVector":
        """Normalize arbitrary raw values; the zero vector maps to e_0."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"expected a 1-d vector, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("raw vector contains non-finite values")
        norm = float(np.linalg.norm(arr))
        if norm == 0.0:
            basis = np.zeros(arr.shape[0], dtype=np.float64)
            basis[0] = 1.0
            return cls(basis.astype(np.float32))
        return cls((arr / norm).astype(np.float32))

    def __repr__(self):
        return f"EmbeddingVector(dims={self.dims})"


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine similarity; a plain dot product since inputs are unit-norm."""
    if a.dims != b.dims:
        raise ValueError(f"dims mismatch: {a.dims} vs {b.dims}")
    return float(np.dot(a.values.astype(np.float64), b.values.astype(np.float64)))


@dataclass(frozen=True)
class EmbedderConfig:
    backend: str = "hashed-ngram"  # "hashed-ngram" | "remote"
    model_id: str = ""
    endpoint_url: str = ""
    api_shape: str = "native"  # "native" | "openai"
    dims: int = 256
    batch_size: int = 32
    timeout: float = 30.0
    max_retries: int = 3
    retry_backoff_s: float = 0.5

    def __post_init__(self):
        if self.backend not in ("hashed-ngram", "remote"):
            raise ValueError(f"unknown embedding backend: {self.backend!r}")
        if self.dims < 8:
            raise ValueError(f"dims must be >= 8, got {self.dims}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.backend == "remote" and not self.endpoint_url:
            raise ValueError("remote embedding backend requires endpoint_url")

    def fingerprint(self) -> str:
        if self.backend == "hashed-ngram":
            return f"embed:hashed-ngram/dims={self.dims}"
        return f"embed:remote/{self.model_id}"


def _embed_hashed(config: EmbedderConfig, texts: list[str]) -> list[EmbeddingVector]:
    return [
        EmbeddingVector.from_raw(kernels.ngram_counts(t, config.dims)) for t in texts
    ]


@dataclass
class RemoteEmbeddingClient:
    """HTTP client for the embedding service, with batching and retries."""

    config: EmbedderConfig
    session: requests.Session = field(default_factory=requests.Session)

    def _request(self, batch: list[str]) -> list[list[float]]:
        cfg = self.config
        if cfg.api_shape == "openai":
            url = cfg.endpoint_url.rstrip("/") + "/v1/embeddings"
            payload = {"model": cfg.model_id, "input": batch}
        else:
            url = cfg.endpoint_url.rstrip("/") + "/embed"
            payload = {"model": cfg.model_id, "inputs": batch}
        last_error: Exception | None = None
        for attempt in range(cfg.max_retries + 1):
            try:
                resp = self.session.post(url, json=payload, timeout=cfg.timeout)
            except requests.RequestException as exc:
                last_error = BackendError(f"embedding request failed: {exc}")
            else:
                if resp.status_code == 200:
                    body = resp.json()
                    if cfg.api_shape == "openai":
                        return [item["embedding"] for item in body["data"]]
                    return body["vectors"]
                last_error = BackendError(
                    f"embedding service returned {resp.status_code}",
                    status=resp.status_code,
                    body=resp.text,
                )
            if attempt < cfg.max_retries:
                time.sleep(cfg.retry_backoff_s * (2**attempt))
        raise last_error  # type: ignore[misc]

    def embed(self, texts: list[str]) -> list[EmbeddingVector]:
        out: list[EmbeddingVector] = []
        dims: int | None = None
        for start in range(0, len(texts), self.config.batch_size):
            batch = texts[start : start + self.config.batch_size]
            rows = self._request(batch)
            if len(rows) != len(batch):
                raise BackendError(
                    f"embedding service returned {len(rows)} vectors "
                    f"for {len(batch)} inputs"
                )
            for row in rows:
                vec = EmbeddingVector.from_raw(np.asarray(row, dtype=np.float64))
                if dims is None:
                    dims = vec.dims
                elif vec.dims != dims:
                    raise BackendError(
                        f"inconsistent dims across a batch: {vec.dims} vs {dims}"
                    )
                out.append(vec)
        return out


def embed_texts(config: EmbedderConfig, texts: list[str]) -> list[EmbeddingVector]:
    """Embed ``texts`` in order; one unit-norm vector per input."""
    if not texts:
        return []
    if config.backend == "hashed-ngram":
        return _embed_hashed(config, texts)
    return RemoteEmbeddingClient(config).embed(texts)
