"""Text embedding providers.

Two backends sit behind the same interface: a remote HTTP provider speaking
the common ``/embeddings`` JSON shape (1536-dimensional by default), and a
deterministic local fallback so the whole pipeline runs offline. The
fallback maps each token to a pseudo-random direction seeded from a stable
hash of the token bytes, sums the directions, and normalizes to unit length.
"""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass
from typing import Protocol

import httpx
import numpy as np

DEFAULT_DIM = 1536


class EmbeddingError(Exception):
    """Raised when a provider cannot produce a vector; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


def _token_seed(token: str, salt: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") ^ salt


@dataclass
class HashEmbedder:
    """Deterministic local fallback: seeded random projection of token hashes."""

    dim: int = DEFAULT_DIM
    seed: int = 0

    def embed(self, text: str) -> np.ndarray:
        from codeloop.tokenizer import _WORD_OR_SYMBOL

        tokens = _WORD_OR_SYMBOL.findall(text) or ["\x00empty"]
        acc = np.zeros(self.dim, dtype=np.float64)
        for token in tokens:
            rng = np.random.Generator(np.random.PCG64(_token_seed(token, self.seed)))
            acc += rng.standard_normal(self.dim)
        norm = float(np.linalg.norm(acc))
        if norm == 0.0:  # only reachable if token directions cancel exactly
            acc[0] = 1.0
            norm = 1.0
        return (acc / norm).astype(np.float32)


class HttpEmbedder:
    """Remote embeddings endpoint client with bounded retries.

    The API key is read from the environment, never from config files.
    Transient failures (HTTP 429/5xx, transport errors) are retried with
    exponential backoff; anything else fails immediately.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        dim: int = DEFAULT_DIM,
        api_key_env: str = "CODELOOP_EMBED_API_KEY",
        max_attempts: int = 3,
        base_delay: float = 1.0,
        transport: httpx.BaseTransport | None = None,
        sleep=time.sleep,
    ) -> None:
        self.dim = dim
        self._model = model
        self._max_attempts = max_attempts
        self._base_delay = base_delay
        self._sleep = sleep
        headers = {}
        key = os.environ.get(api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(base_url=base_url, headers=headers, transport=transport)

    def embed(self, text: str) -> np.ndarray:
        last: dict = {}
        for attempt in range(1, self._max_attempts + 1):
            try:
                resp = self._client.post(
                    "/embeddings", json={"model": self._model, "input": text}
                )
            except httpx.TransportError as exc:
                last = {"attempt": attempt, "error": str(exc)}
            else:
                if resp.status_code == 200:
                    values = resp.json()["data"][0]["embedding"]
                    vec = np.asarray(values, dtype=np.float32)
                    if vec.shape != (self.dim,):
                        raise EmbeddingError(
                            f"provider returned dimension {vec.shape[0]}, expected {self.dim}",
                            {"status": resp.status_code},
                        )
                    return vec
                last = {"attempt": attempt, "status": resp.status_code, "body": resp.text[:500]}
                if resp.status_code not in (429,) and resp.status_code < 500:
                    raise EmbeddingError(
                        f"embedding request rejected with HTTP {resp.status_code}", last
                    )
            if attempt < self._max_attempts:
                self._sleep(self._base_delay * (2 ** (attempt - 1)))
        raise EmbeddingError(
            f"embedding provider failed after {self._max_attempts} attempts", last
        )


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = float(np.linalg.norm(a)) * float(np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.dot(a, b) / denom)
