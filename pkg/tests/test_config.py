from __future__ import annotations

import pytest

from storypipe.config import ConfigError, build_config, interpolate, load_config


def test_defaults_are_valid():
    cfg = build_config()
    assert cfg.dialogue_turns == 3 and cfg.refine_turns == 3
    assert cfg.llm.model == "qwen-2-72b-instruct" and cfg.judge.model == "gpt-4"
    assert (cfg.gains.speech, cfg.gains.sound, cfg.gains.music) == (1.0, 0.5, 0.25)


def test_env_interpolation(monkeypatch):
    monkeypatch.setenv("SP_URL", "http://x")
    assert interpolate({"a": ["${SP_URL}/v1"], "b": "${SP_MISSING:-dflt}"}) == {"a": ["http://x/v1"], "b": "dflt"}
    monkeypatch.delenv("SP_MISSING", raising=False)
    with pytest.raises(ConfigError, match="SP_MISSING"):
        interpolate("${SP_MISSING}")


def test_overrides_win_and_none_is_ignored():
    cfg = build_config({"rng_seed": 1, "video": {"fps": 30}}, {"rng_seed": 9, "workers": None})
    assert cfg.rng_seed == 9 and cfg.workers == 4 and cfg.video.fps == 30 and cfg.video.width == 1280


@pytest.mark.parametrize("data", [
    {"gains": {"music": 0.0}},
    {"gains": {"sound": 1.5}},
    {"refine_turns": 0},
    {"video": {"width": 63}},
    {"unknown_key": 1},
])
def test_invalid_configs(data):
    with pytest.raises(ConfigError):
        build_config(data)


def test_fingerprint_ignores_runtime_fields():
    a = build_config({"workers": 1, "render": False})
    b = build_config({"workers": 8, "best_effort": True})
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != build_config({"rng_seed": 1}).fingerprint()


def test_load_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("refine_turns: 2\nllm:\n  kind: mock\n  model: m\n")
    cfg = load_config(p, {"dialogue_turns": 5})
    assert cfg.refine_turns == 2 and cfg.llm.model == "m" and cfg.dialogue_turns == 5
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
