"""Content-addressed response cache.

Entries live at ``<root>/<provider_id>/<key>`` with a sidecar
``<key>.json`` holding the canonical request.  A hit is only served when the
sidecar matches the request exactly, so a hash collision degrades to a miss
instead of returning someone else's response.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from pathlib import Path
from typing import Any, Callable

from ..storage import atomic_write_bytes, canonical_json, sha256_hex

log = logging.getLogger(__name__)

_WS = re.compile(r"\s+")


def canonicalize(value: Any) -> Any:
    """Stable form of a request: sorted keys, whitespace-collapsed strings."""
    if isinstance(value, str):
        return _WS.sub(" ", value).strip()
    if isinstance(value, dict):
        return {str(k): canonicalize(v) for k, v in sorted(value.items())}
    if isinstance(value, (list, tuple)):
        return [canonicalize(v) for v in value]
    if isinstance(value, float) and value.is_integer():
        return int(value)
    return value


def cache_key(provider_id: str, request: dict[str, Any]) -> str:
    return sha256_hex(canonical_json({"provider": provider_id, "request": canonicalize(request)}))


class ResponseCache:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._lock = threading.Lock()

    def _paths(self, provider_id: str, key: str) -> tuple[Path, Path]:
        base = self.root / provider_id / key
        return base, base.with_name(key + ".json")

    def get(self, provider_id: str, request: dict[str, Any]) -> bytes | None:
        key = cache_key(provider_id, request)
        body, meta = self._paths(provider_id, key)
        try:
            stored = json.loads(meta.read_text(encoding="utf-8"))
            if stored.get("request") != canonicalize(request) or stored.get("provider") != provider_id:
                log.warning("cache key collision for %s/%s; ignoring entry", provider_id, key)
                return None
            return body.read_bytes()
        except FileNotFoundError:
            return None
        except (OSError, ValueError) as exc:
            log.warning("cache read failed for %s/%s: %s", provider_id, key, exc)
            return None

    def put(self, provider_id: str, request: dict[str, Any], response: bytes) -> None:
        key = cache_key(provider_id, request)
        body, meta = self._paths(provider_id, key)
        sidecar = {"provider": provider_id, "request": canonicalize(request), "created_at": time.time()}
        try:
            with self._lock:
                atomic_write_bytes(body, response)
                atomic_write_bytes(meta, json.dumps(sidecar, sort_keys=True).encode("utf-8"))
        except OSError as exc:
            log.warning("cache store unwritable (%s); passing through", exc)


def cached_call(
    cache: ResponseCache | None,
    provider_id: str,
    request: dict[str, Any],
    upstream: Callable[[], bytes],
) -> bytes:
    """Return the stored response for ``request`` or compute and store it."""
    if cache is None:
        return upstream()
    hit = cache.get(provider_id, request)
    if hit is not None:
        return hit
    response = upstream()
    cache.put(provider_id, request, response)
    return response
