"""Clients for every external capability, plus the factory that wires them from config."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Optional

from .base import (
    AuthenticationError,
    DimensionMismatchError,
    EmptyCompletionError,
    PreconditionError,
    ProviderError,
    RetryPolicy,
    TransportError,
)
from .cache import ResponseCache, cache_key, cached_call, canonicalize
from .chat import ChatClient, ChatMessage, ChatRequest, OpenAICompatibleChat, ScriptedChat, prompt_hash
from .embedding import (
    EmbeddingProvider,
    EmbeddingVector,
    HTTPEmbeddingProvider,
    MockEmbeddingProvider,
    NormalizationError,
    Payload,
    SpaceMismatchError,
    cosine_similarity,
)
from .media import (
    AudioProvider,
    FreesoundClient,
    HTTPAudioProvider,
    HTTPImageProvider,
    HTTPSpeechProvider,
    ImageProvider,
    MockAudioProvider,
    MockImageProvider,
    MockSearchProvider,
    MockSpeechProvider,
    SearchHit,
    SearchProvider,
    SearchQuery,
    SpeechProvider,
)
from .mock_llm import StoryMockLLM

if TYPE_CHECKING:
    from ..config import PipelineConfig, ProviderSpec


@dataclass
class ProviderSet:
    llm: ChatClient
    judge: ChatClient
    image: ImageProvider
    speech: SpeechProvider
    sound: Optional[AudioProvider] = None
    music: Optional[AudioProvider] = None
    search: Optional[SearchProvider] = None
    embed: Optional[EmbeddingProvider] = None


def _retry(spec: "ProviderSpec") -> RetryPolicy:
    return RetryPolicy(max_attempts=spec.max_attempts)


def _chat(spec: "ProviderSpec", name: str, cache: ResponseCache | None) -> ChatClient:
    common = dict(model=spec.model, temperature=spec.temperature, max_tokens=spec.max_tokens, cache=cache)
    if spec.kind == "mock":
        return StoryMockLLM(provider_id=spec.provider_id or f"mock-{name}", **common)
    if spec.kind in ("openai", "http"):
        if not spec.url:
            raise ValueError(f"{name}: url is required for kind={spec.kind}")
        return OpenAICompatibleChat(spec.url, token_env=spec.token_env or "STORYPIPE_LLM_TOKEN",
                                    provider_id=spec.provider_id or name, timeout_s=spec.timeout_s,
                                    retry=_retry(spec), **common)
    raise ValueError(f"{name}: unsupported provider kind {spec.kind!r}")


def _http_or_mock(spec: "ProviderSpec", name: str, mock_cls, http_cls, cache, **mock_kwargs):
    if spec.kind == "mock":
        client = mock_cls(cache=cache, **mock_kwargs)
        if spec.provider_id:
            client.provider_id = spec.provider_id
        return client
    if spec.kind == "http":
        if not spec.url:
            raise ValueError(f"{name}: url is required for kind=http")
        return http_cls(spec.url, provider_id=spec.provider_id or name, token_env=spec.token_env,
                        timeout_s=spec.timeout_s, cache=cache, retry=_retry(spec))
    raise ValueError(f"{name}: unsupported provider kind {spec.kind!r}")


def build_providers(config: "PipelineConfig", cache_root: str | Path | None = None,
                    encoder: str | None = None) -> ProviderSet:
    cache = ResponseCache(cache_root) if cache_root else None
    sr = config.video.sample_rate
    sound = music = search = None
    if config.enable_sound and config.sound_mode == "generate":
        sound = _http_or_mock(config.sound, "sound", MockAudioProvider, HTTPAudioProvider, cache, sample_rate=sr)
    if config.enable_music and config.music_mode == "generate":
        music = _http_or_mock(config.music, "music", MockAudioProvider, HTTPAudioProvider, cache,
                              sample_rate=sr, amplitude=0.2)
    needs_search = (config.enable_sound and config.sound_mode == "retrieve") or (
        config.enable_music and config.music_mode == "retrieve")
    if needs_search:
        if config.search.kind == "freesound":
            search = FreesoundClient(token_env=config.search.token_env or "STORYPIPE_FREESOUND_TOKEN",
                                     encoder=encoder, cache=cache, retry=_retry(config.search), sample_rate=sr)
        else:
            search = MockSearchProvider(cache=cache, sample_rate=sr)
    embed = None
    if config.embed.kind == "mock":
        embed = MockEmbeddingProvider()
    elif config.embed.kind == "http":
        embed = HTTPEmbeddingProvider(config.embed.url, provider_id=config.embed.provider_id or "embed",
                                      token_env=config.embed.token_env, retry=_retry(config.embed))
    return ProviderSet(
        llm=_chat(config.llm, "llm", cache),
        judge=_chat(config.judge, "judge", cache),
        image=_http_or_mock(config.image, "image", MockImageProvider, HTTPImageProvider, cache),
        speech=_http_or_mock(config.speech, "speech", MockSpeechProvider, HTTPSpeechProvider, cache,
                             sample_rate=sr),
        sound=sound,
        music=music,
        search=search,
        embed=embed,
    )


__all__ = [
    "AudioProvider", "AuthenticationError", "ChatClient", "ChatMessage", "ChatRequest", "DimensionMismatchError",
    "EmbeddingProvider", "EmbeddingVector", "EmptyCompletionError", "FreesoundClient", "HTTPAudioProvider",
    "HTTPEmbeddingProvider", "HTTPImageProvider", "HTTPSpeechProvider", "ImageProvider", "MockAudioProvider",
    "MockEmbeddingProvider", "MockImageProvider", "MockSearchProvider", "MockSpeechProvider", "NormalizationError",
    "OpenAICompatibleChat", "Payload", "PreconditionError", "ProviderError", "ProviderSet", "ResponseCache",
    "RetryPolicy", "ScriptedChat", "SearchHit", "SearchProvider", "SearchQuery", "SpaceMismatchError",
    "SpeechProvider", "StoryMockLLM", "TransportError", "build_providers", "cache_key", "cached_call",
    "canonicalize", "cosine_similarity", "prompt_hash",
]
