"""Pipeline configuration: one declarative YAML/JSON file plus flag overrides.

String values may reference environment variables as ``${NAME}`` or
``${NAME:-default}``; secrets are normally read at call time through each
provider's ``token_env`` instead.
"""

from __future__ import annotations

import json
import math
import os
import re
from pathlib import Path
from typing import Any, Literal, Optional

import pydantic
import yaml
from pydantic import BaseModel, ConfigDict

from .schema import Record, RecordValidationError, WritingMethod
from .storage import canonical_json, sha256_hex


class ConfigError(Exception):
    pass


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ProviderSpec(_Frozen):
    kind: Literal["mock", "http", "openai", "freesound"] = "mock"
    url: str = ""
    model: str = ""
    token_env: str = ""
    provider_id: str = ""
    timeout_s: float = 120.0
    max_attempts: int = 3
    temperature: Optional[float] = None
    max_tokens: Optional[int] = None


class Gains(_Frozen):
    speech: float = 1.0
    sound: float = 0.5
    music: float = 0.25


class VideoSettings(_Frozen):
    width: int = 1280
    height: int = 720
    fps: int = 24
    transition_s: float = 0.5
    motion_min: float = 0.02
    motion_max: float = 0.06
    loop_fade_ms: float = 30.0
    ceiling_dbfs: float = -1.0
    sample_rate: int = 24_000


# Fields that change how a run executes but not what it produces.
RUNTIME_FIELDS = frozenset({"workers", "best_effort", "render", "encoder", "cache_dir"})


class PipelineConfig(Record):
    dialogue_turns: int = 3
    refine_turns: int = 3
    rng_seed: int = 0
    method: WritingMethod = WritingMethod.STORY_AGENT
    chapter_length: str = "2 to 4 sentences"

    llm: ProviderSpec = ProviderSpec(model="qwen-2-72b-instruct")
    judge: ProviderSpec = ProviderSpec(model="gpt-4")
    image: ProviderSpec = ProviderSpec()
    speech: ProviderSpec = ProviderSpec()
    sound: ProviderSpec = ProviderSpec()
    music: ProviderSpec = ProviderSpec()
    search: ProviderSpec = ProviderSpec()
    embed: ProviderSpec = ProviderSpec()

    sound_mode: Literal["generate", "retrieve"] = "generate"
    music_mode: Literal["generate", "retrieve"] = "generate"
    enable_sound: bool = True
    enable_music: bool = True
    voice: str = "default"
    sound_duration_s: float = 5.0
    music_duration_s: float = 30.0
    image_width: int = 1024
    image_height: int = 1024
    image_style: Optional[str] = None
    templates_dir: Optional[str] = None

    gains: Gains = Gains()
    video: VideoSettings = VideoSettings()

    workers: int = 4
    best_effort: bool = False
    render: bool = True
    encoder: str = ""
    cache_dir: str = ""

    def violations(self) -> list[str]:
        out = []
        for name in ("dialogue_turns", "refine_turns", "workers", "image_width", "image_height"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be a positive integer")
        if not -(2**63) <= self.rng_seed < 2**64:
            out.append("rng_seed must fit in 64 bits")
        for track in ("speech", "sound", "music"):
            g = getattr(self.gains, track)
            if not (0 < g <= 1) or not math.isfinite(g):
                out.append(f"gains.{track} must be in (0, 1]")
        v = self.video
        if v.width < 2 or v.height < 2 or v.width % 2 or v.height % 2:
            out.append("video width/height must be even and ≥ 2")
        if v.fps < 1:
            out.append("video.fps must be positive")
        if v.transition_s < 0:
            out.append("video.transition_s must be nonnegative")
        if not 0 < v.motion_min <= v.motion_max < 1:
            out.append("video motion bounds need 0 < motion_min ≤ motion_max < 1")
        if v.loop_fade_ms < 0:
            out.append("video.loop_fade_ms must be nonnegative")
        if v.ceiling_dbfs > 0:
            out.append("video.ceiling_dbfs must be ≤ 0")
        if self.sound_duration_s <= 0 or self.music_duration_s <= 0:
            out.append("sound_duration_s and music_duration_s must be positive")
        if self.sound_mode == "retrieve" and self.search.kind not in ("mock", "freesound"):
            out.append("sound_mode=retrieve needs search.kind mock or freesound")
        return out

    def fingerprint(self) -> str:
        body = self.model_dump(mode="json", exclude=set(RUNTIME_FIELDS))
        return sha256_hex(canonical_json(body))[:16]


_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")


def interpolate(value: Any) -> Any:
    if isinstance(value, str):
        def sub(m: re.Match) -> str:
            name, default = m.group(1), m.group(2)
            if name in os.environ:
                return os.environ[name]
            if default is not None:
                return default
            raise ConfigError(f"environment variable {name} is not set")

        return _ENV_REF.sub(sub, value)
    if isinstance(value, dict):
        return {k: interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate(v) for v in value]
    return value


def _merge(base: dict[str, Any], extra: dict[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def build_config(data: dict[str, Any] | None = None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    merged = _merge(interpolate(data or {}), {k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        cfg = PipelineConfig.model_validate(merged)
    except pydantic.ValidationError as exc:
        problems = [f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid config: " + "; ".join(problems)) from None
    try:
        cfg.check()
    except RecordValidationError as exc:
        raise ConfigError("invalid config: " + "; ".join(exc.violations)) from None
    return cfg


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
            data = json.loads(text) if str(path).endswith(".json") else (yaml.safe_load(text) or {})
        except (OSError, ValueError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
        data.pop("schema_version", None)
        data.pop("type", None)
    return build_config(data, overrides)
