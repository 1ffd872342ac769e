"""Cross-modal embeddings in three joint spaces and cosine scoring."""

from __future__ import annotations

import base64
import math
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Literal, Sequence

import httpx
import numpy as np

from ..storage import sha256_hex
from .base import PreconditionError, ProviderError, RetryPolicy, call_with_retries, raise_for_status

Space = Literal["image_text", "audio_text", "audio_image"]
PayloadKind = Literal["text", "image", "audio"]

SPACE_ACCEPTS: dict[str, frozenset[str]] = {
    "image_text": frozenset({"image", "text"}),
    "audio_text": frozenset({"audio", "text"}),
    "audio_image": frozenset({"audio", "image"}),
}


class SpaceMismatchError(ProviderError):
    pass


class NormalizationError(ProviderError):
    pass


@dataclass(frozen=True)
class Payload:
    kind: PayloadKind
    data: str | bytes

    @classmethod
    def text(cls, text: str) -> "Payload":
        return cls("text", text)

    @classmethod
    def image(cls, path: str | Path) -> "Payload":
        return cls("image", Path(path).read_bytes())

    @classmethod
    def audio(cls, path: str | Path) -> "Payload":
        return cls("audio", Path(path).read_bytes())

    def digest(self) -> str:
        return sha256_hex(self.data if isinstance(self.data, bytes) else self.data.encode("utf-8"))


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    space: Space

    @property
    def dim(self) -> int:
        return len(self.values)


def normalize(raw: Sequence[float], space: Space) -> EmbeddingVector:
    vec = np.asarray(raw, dtype=np.float64).ravel()
    norm = float(np.linalg.norm(vec)) if vec.size else 0.0
    if not vec.size or not math.isfinite(norm) or norm == 0.0:
        raise NormalizationError("cannot normalize a zero or non-finite embedding")
    return EmbeddingVector(tuple(float(v) for v in vec / norm), space)


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.space != b.space:
        raise SpaceMismatchError(f"cannot compare {a.space} with {b.space} embeddings")
    if a.dim != b.dim:
        raise SpaceMismatchError(f"dimension mismatch: {a.dim} vs {b.dim}")
    dot = float(np.dot(a.values, b.values))
    return max(-1.0, min(1.0, dot))


class EmbeddingProvider:
    provider_id = "embed"

    def __init__(self, *, retry: RetryPolicy | None = None):
        self.retry = retry or RetryPolicy()
        self.upstream_calls = 0
        self._dims: dict[str, int] = {}
        self._lock = threading.Lock()

    def _embed(self, space: Space, payload: Payload) -> Sequence[float]:
        raise NotImplementedError

    def embed(self, space: Space, payload: Payload) -> EmbeddingVector:
        if space not in SPACE_ACCEPTS:
            raise SpaceMismatchError(f"unknown embedding space {space!r}")
        if payload.kind not in SPACE_ACCEPTS[space]:
            raise SpaceMismatchError(f"{payload.kind} payloads are not accepted by the {space} space")
        if not payload.data:
            raise PreconditionError("embedding payload must be non-empty")

        def once() -> Sequence[float]:
            with self._lock:
                self.upstream_calls += 1
            return self._embed(space, payload)

        raw, _ = call_with_retries(once, self.retry, self.provider_id)
        vec = normalize(raw, space)
        with self._lock:
            expected = self._dims.setdefault(space, vec.dim)
        if vec.dim != expected:
            raise ProviderError(f"{space} embeddings changed dimension: {vec.dim} vs {expected}")
        return vec


class MockEmbeddingProvider(EmbeddingProvider):
    """Embeds via ``fn(space, payload)``; default is a payload-hash Gaussian vector."""

    provider_id = "mock-embed"

    def __init__(self, fn: Callable[[Space, Payload], Sequence[float]] | None = None, *, dim: int = 16, **kwargs: Any):
        super().__init__(**kwargs)
        self.fn = fn
        self.dim = dim

    def _embed(self, space: Space, payload: Payload) -> Sequence[float]:
        if self.fn is not None:
            return self.fn(space, payload)
        seed = int(sha256_hex(f"{space}:{payload.digest()}")[:16], 16)
        return np.random.default_rng(seed).standard_normal(self.dim).tolist()


class HTTPEmbeddingProvider(EmbeddingProvider):
    """``POST url`` with ``{space, modality, text | data_b64}``; reply ``{"embedding": [...]}``."""

    def __init__(self, url: str, *, provider_id: str = "embed", token_env: str = "", timeout_s: float = 120.0,
                 transport: httpx.BaseTransport | None = None, **kwargs: Any):
        super().__init__(**kwargs)
        self.provider_id = provider_id
        self.url = url
        self.token_env = token_env
        self._http = httpx.Client(timeout=timeout_s, transport=transport)

    def _embed(self, space: Space, payload: Payload) -> Sequence[float]:
        body: dict[str, Any] = {"space": space, "modality": payload.kind}
        if isinstance(payload.data, str):
            body["text"] = payload.data
        else:
            body["data_b64"] = base64.b64encode(payload.data).decode("ascii")
        token = os.environ.get(self.token_env) if self.token_env else None
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        resp = self._http.post(self.url, json=body, headers=headers)
        raise_for_status(resp, self.provider_id)
        try:
            return [float(v) for v in resp.json()["embedding"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise ProviderError(f"{self.provider_id}: unexpected response shape: {exc}") from None
