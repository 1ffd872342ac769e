"""Errors and retry policy shared by every provider client."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, TypeVar

import httpx

log = logging.getLogger(__name__)

T = TypeVar("T")


class ProviderError(Exception):
    """The provider answered with an error or an unusable payload."""


class PreconditionError(ValueError):
    """The caller passed an argument the operation does not accept."""


class TransportError(ProviderError):
    def __init__(self, message: str, attempts: int):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempt{'s' if attempts != 1 else ''})")


class AuthenticationError(ProviderError):
    pass


class EmptyCompletionError(ProviderError):
    pass


class DimensionMismatchError(ProviderError):
    pass


class RetryableError(Exception):
    """Raised inside a provider call to request another attempt."""


RETRYABLE_STATUS = frozenset({408, 425, 429, 500, 502, 503, 504})


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    backoff_s: float = 1.0
    max_backoff_s: float = 30.0
    sleep: Callable[[float], None] = field(default=time.sleep, repr=False)

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be ≥ 1")

    def delay(self, attempt: int) -> float:
        return min(self.backoff_s * 2 ** (attempt - 1), self.max_backoff_s)


def call_with_retries(fn: Callable[[], T], policy: RetryPolicy, what: str = "request") -> tuple[T, int]:
    """Run ``fn`` until it succeeds or the attempt budget is spent.

    Only :class:`RetryableError` and httpx transport failures are retried.
    Returns the result together with the number of attempts used.
    """
    last: Exception | None = None
    for attempt in range(1, policy.max_attempts + 1):
        try:
            return fn(), attempt
        except (RetryableError, httpx.TransportError) as exc:
            last = exc
            log.warning("%s failed on attempt %d/%d: %s", what, attempt, policy.max_attempts, exc)
            if attempt < policy.max_attempts:
                policy.sleep(policy.delay(attempt))
    raise TransportError(f"{what} failed: {last}", policy.max_attempts)


def raise_for_status(response: httpx.Response, what: str) -> None:
    if response.status_code in (401, 403):
        raise AuthenticationError(f"{what}: authentication rejected ({response.status_code})")
    if response.status_code in RETRYABLE_STATUS:
        raise RetryableError(f"{what}: HTTP {response.status_code}")
    if response.status_code >= 400:
        raise ProviderError(f"{what}: HTTP {response.status_code}: {response.text[:200]}")
