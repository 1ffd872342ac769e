"""Image, speech, audio-generation and audio-search clients.

Each capability has a base class that owns the contract (preconditions,
caching, measurement, writing the asset file) and a ``_fetch``/``_render``
hook for the actual backend.  Durations are always measured from the
decoded waveform.
"""

from __future__ import annotations

import io
import logging
import os
import subprocess
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Literal, Mapping, Sequence

import httpx
from PIL import Image

from ..schema import Asset
from ..storage import atomic_write_bytes, sha256_hex
from . import audio
from .base import (
    AuthenticationError,
    DimensionMismatchError,
    PreconditionError,
    ProviderError,
    RetryPolicy,
    call_with_retries,
    raise_for_status,
)
from .cache import ResponseCache, cache_key, cached_call

log = logging.getLogger(__name__)


class _Client:
    provider_id = "provider"

    def __init__(self, *, cache: ResponseCache | None = None, retry: RetryPolicy | None = None):
        self.cache = cache
        self.retry = retry or RetryPolicy()
        self.upstream_calls = 0
        self._lock = threading.Lock()

    def _call(self, request: dict[str, Any], fetch: Callable[[], bytes]) -> tuple[bytes, str]:
        def upstream() -> bytes:
            def once() -> bytes:
                with self._lock:
                    self.upstream_calls += 1
                return fetch()

            data, _ = call_with_retries(once, self.retry, self.provider_id)
            return data

        data = cached_call(self.cache, self.provider_id, request, upstream)
        return data, cache_key(self.provider_id, request)


def _measure_audio(data: bytes, what: str) -> float:
    try:
        duration = audio.wav_duration(data)
    except Exception as exc:  # wave raises several unrelated types
        raise ProviderError(f"{what}: response is not 16-bit PCM WAV ({exc})") from None
    if duration <= 0:
        raise ProviderError(f"{what}: zero-duration audio")
    return duration


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


class ImageProvider(_Client):
    provider_id = "image"

    def _render(self, prompt: str, seed: int, width: int, height: int) -> bytes:
        raise NotImplementedError

    def generate_image(self, prompt: str, seed: int, width: int, height: int, dest: str | Path, page_index: int = 0) -> Asset:
        if not prompt.strip():
            raise PreconditionError("image prompt must be non-empty")
        request = {"prompt": prompt, "seed": seed, "width": width, "height": height}
        data, key = self._call(request, lambda: self._render(prompt, seed, width, height))
        try:
            with Image.open(io.BytesIO(data)) as img:
                got = img.size
        except Exception as exc:
            raise ProviderError(f"{self.provider_id}: undecodable image ({exc})") from None
        if got != (width, height):
            raise DimensionMismatchError(f"{self.provider_id}: asked for {width}x{height}, got {got[0]}x{got[1]}")
        atomic_write_bytes(dest, data)
        return Asset(
            modality="image",
            page_index=page_index,
            location=str(dest),
            width=width,
            height=height,
            provenance="generated",
            provider_id=self.provider_id,
            cache_key=key,
        )


class MockImageProvider(ImageProvider):
    """Solid-colour PNG whose colour is derived from (prompt, seed)."""

    provider_id = "mock-image"

    def _render(self, prompt: str, seed: int, width: int, height: int) -> bytes:
        digest = bytes.fromhex(sha256_hex(f"{seed}:{prompt}"))
        img = Image.new("RGB", (width, height), tuple(64 + d % 160 for d in digest[:3]))
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return buf.getvalue()


class HTTPImageProvider(ImageProvider):
    """``POST url`` with ``{prompt, seed, width, height}``; the body is a PNG."""

    def __init__(self, url: str, *, provider_id: str = "image", token_env: str = "", timeout_s: float = 600.0,
                 transport: httpx.BaseTransport | None = None, **kwargs: Any):
        super().__init__(**kwargs)
        self.provider_id = provider_id
        self.url = url
        self.token_env = token_env
        self._http = httpx.Client(timeout=timeout_s, transport=transport)

    def _render(self, prompt: str, seed: int, width: int, height: int) -> bytes:
        resp = self._http.post(self.url, json={"prompt": prompt, "seed": seed, "width": width, "height": height},
                               headers=_auth_headers(self.token_env))
        raise_for_status(resp, self.provider_id)
        return resp.content


# ---------------------------------------------------------------------------
# Speech
# ---------------------------------------------------------------------------


class SpeechProvider(_Client):
    provider_id = "speech"

    def _synthesize(self, text: str, voice: str) -> bytes:
        raise NotImplementedError

    def synthesize_speech(self, text: str, voice: str, dest: str | Path, page_index: int = 0) -> Asset:
        if not text.strip():
            raise PreconditionError("speech text must be non-empty")
        request = {"text": text, "voice": voice}
        data, key = self._call(request, lambda: self._synthesize(text, voice))
        duration = _measure_audio(data, self.provider_id)
        atomic_write_bytes(dest, data)
        return Asset(modality="speech", page_index=page_index, location=str(dest), duration_s=duration,
                     provenance="generated", provider_id=self.provider_id, cache_key=key)


class MockSpeechProvider(SpeechProvider):
    """Emits 1.0 s of silence per 10 characters of text."""

    provider_id = "mock-speech"

    def __init__(self, *, seconds_per_char: float = 0.1, sample_rate: int = audio.DEFAULT_SAMPLE_RATE, **kwargs: Any):
        super().__init__(**kwargs)
        self.seconds_per_char = seconds_per_char
        self.sample_rate = sample_rate

    def _synthesize(self, text: str, voice: str) -> bytes:
        return audio.encode_wav(audio.silence(len(text) * self.seconds_per_char, self.sample_rate), self.sample_rate)


class HTTPSpeechProvider(SpeechProvider):
    """``POST url`` with ``{text, voice}``; the body is a 16-bit PCM WAV."""

    def __init__(self, url: str, *, provider_id: str = "speech", token_env: str = "", timeout_s: float = 300.0,
                 transport: httpx.BaseTransport | None = None, **kwargs: Any):
        super().__init__(**kwargs)
        self.provider_id = provider_id
        self.url = url
        self.token_env = token_env
        self._http = httpx.Client(timeout=timeout_s, transport=transport)

    def _synthesize(self, text: str, voice: str) -> bytes:
        resp = self._http.post(self.url, json={"text": text, "voice": voice}, headers=_auth_headers(self.token_env))
        raise_for_status(resp, self.provider_id)
        return resp.content


# ---------------------------------------------------------------------------
# Sound effects and music (generation)
# ---------------------------------------------------------------------------


class AudioProvider(_Client):
    provider_id = "audio"

    def _generate(self, prompt: str, duration_s: float) -> bytes:
        raise NotImplementedError

    def generate_audio(self, prompt: str, target_duration_s: float, dest: str | Path,
                       modality: Literal["sound", "music"] = "sound", page_index: int = 0) -> Asset:
        if not prompt.strip():
            raise PreconditionError("audio prompt must be non-empty")
        if target_duration_s <= 0:
            raise PreconditionError("target_duration_s must be positive")
        request = {"prompt": prompt, "duration_s": target_duration_s}
        data, key = self._call(request, lambda: self._generate(prompt, target_duration_s))
        duration = _measure_audio(data, self.provider_id)
        atomic_write_bytes(dest, data)
        return Asset(modality=modality, page_index=page_index, location=str(dest), duration_s=duration,
                     provenance="generated", provider_id=self.provider_id, cache_key=key)


def _prompt_tone(prompt: str, duration_s: float, amplitude: float, sample_rate: int) -> bytes:
    freq = 220 + int(sha256_hex(prompt)[:4], 16) % 440
    return audio.encode_wav(audio.tone(duration_s, freq, amplitude, sample_rate), sample_rate)


class MockAudioProvider(AudioProvider):
    """Sine tone of exactly the requested duration, pitch keyed on the prompt."""

    provider_id = "mock-audio"

    def __init__(self, *, amplitude: float = 0.3, sample_rate: int = audio.DEFAULT_SAMPLE_RATE, **kwargs: Any):
        super().__init__(**kwargs)
        self.amplitude = amplitude
        self.sample_rate = sample_rate

    def _generate(self, prompt: str, duration_s: float) -> bytes:
        return _prompt_tone(prompt, duration_s, self.amplitude, self.sample_rate)


class HTTPAudioProvider(AudioProvider):
    """``POST url`` with ``{prompt, duration_s}``; the body is a 16-bit PCM WAV."""

    def __init__(self, url: str, *, provider_id: str = "audio", token_env: str = "", timeout_s: float = 600.0,
                 transport: httpx.BaseTransport | None = None, **kwargs: Any):
        super().__init__(**kwargs)
        self.provider_id = provider_id
        self.url = url
        self.token_env = token_env
        self._http = httpx.Client(timeout=timeout_s, transport=transport)

    def _generate(self, prompt: str, duration_s: float) -> bytes:
        resp = self._http.post(self.url, json={"prompt": prompt, "duration_s": duration_s},
                               headers=_auth_headers(self.token_env))
        raise_for_status(resp, self.provider_id)
        return resp.content


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchQuery:
    text: str
    min_duration_s: float = 3.0
    max_duration_s: float = 30.0
    limit: int = 1

    def __post_init__(self) -> None:
        if self.limit < 1:
            raise PreconditionError("limit must be ≥ 1")
        if not self.text.strip():
            raise PreconditionError("query text must be non-empty")
        if self.min_duration_s > self.max_duration_s:
            raise PreconditionError("min_duration_s exceeds max_duration_s")


@dataclass(frozen=True)
class SearchHit:
    id: str
    preview: str
    duration_s: float


class SearchProvider(_Client):
    provider_id = "search"

    def _search(self, query: SearchQuery) -> list[SearchHit]:
        raise NotImplementedError

    def _download(self, hit: SearchHit) -> bytes:
        raise NotImplementedError

    def search_audio(self, query: SearchQuery) -> list[SearchHit]:
        with self._lock:
            self.upstream_calls += 1
        hits, _ = call_with_retries(lambda: self._search(query), self.retry, self.provider_id)
        return list(hits)[: query.limit]

    def fetch(self, hit: SearchHit, dest: str | Path, modality: Literal["sound", "music"] = "sound",
              page_index: int = 0) -> Asset:
        request = {"hit": hit.id, "preview": hit.preview}
        data, key = self._call(request, lambda: self._download(hit))
        duration = _measure_audio(data, self.provider_id)
        atomic_write_bytes(dest, data)
        return Asset(modality=modality, page_index=page_index, location=str(dest), duration_s=duration,
                     provenance="retrieved", provider_id=self.provider_id, cache_key=key)


class MockSearchProvider(SearchProvider):
    """In-memory catalog keyed by phrase; a query matches every key it contains."""

    provider_id = "mock-search"

    def __init__(self, catalog: Mapping[str, Sequence[SearchHit]] | None = None, *, amplitude: float = 0.3,
                 sample_rate: int = audio.DEFAULT_SAMPLE_RATE, **kwargs: Any):
        super().__init__(**kwargs)
        self.catalog = dict(catalog or {})
        self.amplitude = amplitude
        self.sample_rate = sample_rate

    def _search(self, query: SearchQuery) -> list[SearchHit]:
        text = query.text.lower()
        if self.catalog:
            hits = [h for key in sorted(self.catalog) if key.lower() in text for h in self.catalog[key]]
        else:
            # no catalog: every query finds one synthetic clip
            hits = [SearchHit(id=sha256_hex(text)[:12], preview=f"mock://{sha256_hex(text)[:12]}", duration_s=4.0)]
        return [h for h in hits if query.min_duration_s <= h.duration_s <= query.max_duration_s]

    def _download(self, hit: SearchHit) -> bytes:
        return _prompt_tone(hit.id, hit.duration_s, self.amplitude, self.sample_rate)


class FreesoundClient(SearchProvider):
    """Freesound APIv2 text search; previews are transcoded to WAV by the encoder."""

    provider_id = "freesound"
    SEARCH_URL = "https://freesound.org/apiv2/search/text/"

    def __init__(self, *, token_env: str = "STORYPIPE_FREESOUND_TOKEN", encoder: str | None = None,
                 timeout_s: float = 60.0, transport: httpx.BaseTransport | None = None,
                 sample_rate: int = audio.DEFAULT_SAMPLE_RATE, **kwargs: Any):
        super().__init__(**kwargs)
        self.token_env = token_env
        self.encoder = encoder
        self.sample_rate = sample_rate
        self._http = httpx.Client(timeout=timeout_s, transport=transport, follow_redirects=True)

    def _token(self) -> str:
        token = os.environ.get(self.token_env, "")
        if not token:
            raise AuthenticationError(f"Freesound token missing: set {self.token_env}")
        return token

    def _search(self, query: SearchQuery) -> list[SearchHit]:
        params = {
            "query": query.text,
            "filter": f"duration:[{query.min_duration_s} TO {query.max_duration_s}]",
            "page_size": query.limit,
            "fields": "id,name,duration,previews",
            "token": self._token(),
        }
        resp = self._http.get(self.SEARCH_URL, params=params)
        raise_for_status(resp, self.provider_id)
        out = []
        for r in resp.json().get("results", []):
            previews = r.get("previews") or {}
            preview = previews.get("preview-hq-mp3") or previews.get("preview-lq-mp3")
            if preview:
                out.append(SearchHit(id=str(r["id"]), preview=preview, duration_s=float(r.get("duration", 0.0))))
        return out

    def _download(self, hit: SearchHit) -> bytes:
        resp = self._http.get(hit.preview, params={"token": self._token()})
        raise_for_status(resp, self.provider_id)
        if not self.encoder:
            raise ProviderError("Freesound previews are MP3; an encoder binary is needed to transcode them")
        with tempfile.TemporaryDirectory() as tmp:
            src, dst = Path(tmp) / "in.mp3", Path(tmp) / "out.wav"
            src.write_bytes(resp.content)
            subprocess.run(
                [self.encoder, "-v", "error", "-y", "-i", str(src), "-ac", "1", "-ar", str(self.sample_rate),
                 "-c:a", "pcm_s16le", str(dst)],
                check=True,
            )
            return dst.read_bytes()


def _auth_headers(token_env: str) -> dict[str, str]:
    token = os.environ.get(token_env) if token_env else None
    return {"Authorization": f"Bearer {token}"} if token else {}


def audio_peak(path: str | Path) -> float:
    return audio.wav_peak(Path(path).read_bytes())


__all__ = [
    "AudioProvider",
    "FreesoundClient",
    "HTTPAudioProvider",
    "HTTPImageProvider",
    "HTTPSpeechProvider",
    "ImageProvider",
    "MockAudioProvider",
    "MockImageProvider",
    "MockSearchProvider",
    "MockSpeechProvider",
    "SearchHit",
    "SearchProvider",
    "SearchQuery",
    "SpeechProvider",
    "audio_peak",
]
