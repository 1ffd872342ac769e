"""Chat-completion clients.

All clients speak the chat-completions wire shape: a ``messages`` array in,
the first choice's text out.  ``ChatRequest.purpose`` is a local label used
for tracing and by mocks; it never goes over the wire or into cache keys.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from collections import Counter
from pathlib import Path
from typing import Any, Callable, Literal, Mapping, Sequence

import httpx
from pydantic import BaseModel, ConfigDict, model_validator

from ..storage import sha256_hex
from .base import (
    AuthenticationError,
    EmptyCompletionError,
    ProviderError,
    RetryableError,
    RetryPolicy,
    call_with_retries,
    raise_for_status,
)
from .cache import ResponseCache, cached_call

log = logging.getLogger(__name__)


class ChatMessage(BaseModel):
    model_config = ConfigDict(frozen=True)

    role: Literal["system", "user", "assistant"]
    content: str


class ChatRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_tokens: int = 2048
    model: str = ""
    purpose: str = ""

    @model_validator(mode="after")
    def _check(self) -> "ChatRequest":
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[-1].role not in ("user", "system"):
            raise ValueError("last message must have role user or system")
        return self

    @classmethod
    def build(cls, system: str, user: str, **kwargs: Any) -> "ChatRequest":
        msgs = []
        if system:
            msgs.append(ChatMessage(role="system", content=system))
        msgs.append(ChatMessage(role="user", content=user))
        return cls(messages=tuple(msgs), **kwargs)

    @property
    def system(self) -> str:
        return next((m.content for m in self.messages if m.role == "system"), "")

    @property
    def user(self) -> str:
        return next((m.content for m in reversed(self.messages) if m.role == "user"), "")

    @property
    def text(self) -> str:
        return "\n".join(m.content for m in self.messages)

    def wire(self) -> dict[str, Any]:
        body: dict[str, Any] = {
            "messages": [m.model_dump() for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        if self.model:
            body["model"] = self.model
        return body


def prompt_hash(request: ChatRequest) -> str:
    return sha256_hex(request.text)[:16]


class ChatClient:
    """Base client: retries, caching, tracing and call accounting.

    Subclasses implement :meth:`_complete`, which may raise
    :class:`RetryableError` or an httpx transport error to ask for another
    attempt.
    """

    provider_id = "chat"

    def __init__(
        self,
        *,
        model: str = "",
        temperature: float | None = None,
        max_tokens: int | None = None,
        cache: ResponseCache | None = None,
        retry: RetryPolicy | None = None,
        trace_path: str | Path | None = None,
    ):
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.cache = cache
        self.retry = retry or RetryPolicy()
        self.trace_path = Path(trace_path) if trace_path else None
        self.trace: list[dict[str, Any]] = []
        self.upstream_calls = 0
        self.calls_by_purpose: Counter[str] = Counter()
        self.received: list[ChatRequest] = []
        self._lock = threading.Lock()

    def _prepare(self, request: ChatRequest) -> ChatRequest:
        update: dict[str, Any] = {}
        if self.model and not request.model:
            update["model"] = self.model
        if self.temperature is not None:
            update["temperature"] = self.temperature
        if self.max_tokens is not None:
            update["max_tokens"] = self.max_tokens
        return request.model_copy(update=update) if update else request

    def _complete(self, request: ChatRequest) -> str:
        raise NotImplementedError

    def chat(self, request: ChatRequest) -> str:
        request = self._prepare(request)
        attempts = 0

        def upstream() -> bytes:
            nonlocal attempts

            def once() -> str:
                with self._lock:
                    self.upstream_calls += 1
                    self.calls_by_purpose[request.purpose] += 1
                    self.received.append(request)
                return self._complete(request)

            text, attempts = call_with_retries(once, self.retry, f"{self.provider_id} chat")
            if not text or not text.strip():
                raise EmptyCompletionError(f"{self.provider_id} returned an empty completion")
            return text.encode("utf-8")

        text = cached_call(self.cache, self.provider_id, request.wire(), upstream).decode("utf-8")
        self._record(request, text, attempts)
        return text

    def _record(self, request: ChatRequest, response: str, attempts: int) -> None:
        entry = {
            "provider": self.provider_id,
            "purpose": request.purpose,
            "request": request.wire(),
            "response": response,
            "attempts": attempts,
            "cached": attempts == 0,
        }
        with self._lock:
            self.trace.append(entry)
            if self.trace_path is not None:
                self.trace_path.parent.mkdir(parents=True, exist_ok=True)
                with self.trace_path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, ensure_ascii=False) + "\n")


class OpenAICompatibleChat(ChatClient):
    """Client for any endpoint exposing ``POST {base_url}/chat/completions``."""

    def __init__(
        self,
        base_url: str,
        *,
        token_env: str = "STORYPIPE_LLM_TOKEN",
        provider_id: str = "llm",
        timeout_s: float = 120.0,
        transport: httpx.BaseTransport | None = None,
        **kwargs: Any,
    ):
        super().__init__(**kwargs)
        self.provider_id = provider_id
        self.base_url = base_url.rstrip("/")
        self.token_env = token_env
        self._http = httpx.Client(timeout=timeout_s, transport=transport)

    def _complete(self, request: ChatRequest) -> str:
        headers = {}
        token = os.environ.get(self.token_env) if self.token_env else None
        if token:
            headers["Authorization"] = f"Bearer {token}"
        resp = self._http.post(f"{self.base_url}/chat/completions", json=request.wire(), headers=headers)
        raise_for_status(resp, self.provider_id)
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"{self.provider_id}: unexpected response shape: {exc}") from None
        return content or ""


Script = Callable[[ChatRequest], str] | Mapping[str, str] | Sequence[str]


class ScriptedChat(ChatClient):
    """Deterministic mock driven by a script.

    ``script`` may be a callable ``request -> text``, a mapping from
    :func:`prompt_hash` to text, or a sequence of replies handed out in order.
    ``fail_first`` injects that many transient failures before answering.
    """

    def __init__(self, script: Script, *, provider_id: str = "mock-llm", fail_first: int = 0, **kwargs: Any):
        kwargs.setdefault("retry", RetryPolicy(max_attempts=3, backoff_s=0.0, sleep=lambda _s: None))
        super().__init__(**kwargs)
        self.provider_id = provider_id
        self.script = script
        self.fail_first = fail_first
        self._cursor = 0

    def _complete(self, request: ChatRequest) -> str:
        if self.fail_first > 0:
            self.fail_first -= 1
            raise RetryableError("injected transient failure")
        if callable(self.script):
            return self.script(request)
        if isinstance(self.script, Mapping):
            key = prompt_hash(request)
            if key not in self.script:
                raise ProviderError(f"scripted mock has no reply for prompt {key}")
            return self.script[key]
        with self._lock:
            if self._cursor >= len(self.script):
                raise ProviderError("scripted mock ran out of replies")
            reply = self.script[self._cursor]
            self._cursor += 1
        return reply


__all__ = [
    "AuthenticationError",
    "ChatClient",
    "ChatMessage",
    "ChatRequest",
    "OpenAICompatibleChat",
    "ScriptedChat",
    "prompt_hash",
]
