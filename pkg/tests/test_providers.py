from __future__ import annotations

import io
import json
import math

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from storypipe.providers import (
    AuthenticationError,
    ChatRequest,
    DimensionMismatchError,
    EmptyCompletionError,
    FreesoundClient,
    HTTPAudioProvider,
    HTTPEmbeddingProvider,
    HTTPImageProvider,
    HTTPSpeechProvider,
    MockAudioProvider,
    MockEmbeddingProvider,
    MockImageProvider,
    MockSearchProvider,
    MockSpeechProvider,
    NormalizationError,
    OpenAICompatibleChat,
    Payload,
    PreconditionError,
    ProviderError,
    ResponseCache,
    RetryPolicy,
    ScriptedChat,
    SearchHit,
    SearchQuery,
    SpaceMismatchError,
    TransportError,
    cache_key,
    cosine_similarity,
    prompt_hash,
)
from storypipe.providers import audio
from storypipe.providers.embedding import normalize

NO_SLEEP = RetryPolicy(max_attempts=3, backoff_s=0.0, sleep=lambda _s: None)


def _req(text="hello", **kw):
    return ChatRequest.build("sys", text, **kw)


# -- cache --------------------------------------------------------------------


def test_cache_key_ignores_whitespace_and_key_order():
    a = cache_key("p", {"prompt": "a  red\n ball", "seed": 1, "w": 64.0})
    b = cache_key("p", {"w": 64, "seed": 1, "prompt": "a red ball"})
    assert a == b
    assert a != cache_key("q", {"w": 64, "seed": 1, "prompt": "a red ball"})
    assert a != cache_key("p", {"w": 64, "seed": 2, "prompt": "a red ball"})


def test_second_identical_chat_is_served_from_cache(tmp_path):
    llm = ScriptedChat(lambda r: "reply", cache=ResponseCache(tmp_path))
    assert llm.chat(_req()) == llm.chat(_req()) == "reply"
    assert llm.upstream_calls == 1
    assert llm.trace[1]["cached"] is True


def test_purpose_does_not_change_cache_key(tmp_path):
    llm = ScriptedChat(lambda r: "reply", cache=ResponseCache(tmp_path))
    llm.chat(_req(purpose="a"))
    llm.chat(_req(purpose="b"))
    assert llm.upstream_calls == 1


def test_collision_sidecar_mismatch_is_a_miss(tmp_path):
    cache = ResponseCache(tmp_path)
    cache.put("p", {"x": 1}, b"one")
    key = cache_key("p", {"x": 1})
    sidecar = tmp_path / "p" / f"{key}.json"
    meta = json.loads(sidecar.read_text())
    meta["request"] = {"x": 2}
    sidecar.write_text(json.dumps(meta))
    assert cache.get("p", {"x": 1}) is None


def test_unwritable_cache_passes_through(tmp_path):
    blocker = tmp_path / "cache"
    blocker.write_text("not a directory")
    llm = ScriptedChat(lambda r: "reply", cache=ResponseCache(blocker))
    assert llm.chat(_req()) == "reply"
    assert llm.chat(_req()) == "reply"
    assert llm.upstream_calls == 2


# -- chat ---------------------------------------------------------------------


def test_request_must_end_with_user_or_system():
    from storypipe.providers import ChatMessage

    with pytest.raises(ValueError):
        ChatRequest(messages=(ChatMessage(role="assistant", content="x"),))


def test_transient_failures_are_retried():
    llm = ScriptedChat(lambda r: "ok", fail_first=2)
    assert llm.chat(_req()) == "ok"
    assert llm.upstream_calls == 3 and llm.trace[-1]["attempts"] == 3


def test_retry_budget_exhausted():
    llm = ScriptedChat(lambda r: "ok", fail_first=5)
    with pytest.raises(TransportError) as exc:
        llm.chat(_req())
    assert exc.value.attempts == 3


def test_empty_completion():
    with pytest.raises(EmptyCompletionError):
        ScriptedChat(lambda r: "   ").chat(_req())


def test_scripted_by_hash_and_list():
    req = _req("q")
    assert ScriptedChat({prompt_hash(req): "mapped"}).chat(req) == "mapped"
    seq = ScriptedChat(["a", "b"])
    assert [seq.chat(_req("1")), seq.chat(_req("2"))] == ["a", "b"]
    with pytest.raises(ProviderError):
        seq.chat(_req("3"))


def test_trace_file(tmp_path):
    llm = ScriptedChat(lambda r: "x", trace_path=tmp_path / "trace.jsonl")
    llm.chat(_req(purpose="demo"))
    line = json.loads((tmp_path / "trace.jsonl").read_text())
    assert line["purpose"] == "demo" and line["response"] == "x"


def _openai(handler, **kw):
    return OpenAICompatibleChat("http://llm.test/v1", transport=httpx.MockTransport(handler), retry=NO_SLEEP, **kw)


def test_openai_wire_format(monkeypatch):
    monkeypatch.setenv("TEST_TOKEN", "sekrit")
    seen = {}

    def handler(request: httpx.Request) -> httpx.Response:
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": "hi"}}]})

    llm = _openai(handler, token_env="TEST_TOKEN", model="m1", temperature=0.0)
    assert llm.chat(_req("hello", purpose="x")) == "hi"
    assert seen["url"] == "http://llm.test/v1/chat/completions"
    assert seen["auth"] == "Bearer sekrit"
    assert seen["body"]["model"] == "m1" and seen["body"]["messages"][-1] == {"role": "user", "content": "hello"}
    assert "purpose" not in seen["body"]


def test_openai_retries_on_429_then_succeeds():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 2:
            return httpx.Response(429)
        return httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]})

    assert _openai(handler).chat(_req()) == "ok"
    assert len(calls) == 2


def test_openai_auth_error_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(401)

    with pytest.raises(AuthenticationError):
        _openai(handler).chat(_req())
    assert len(calls) == 1


def test_openai_transport_errors_exhaust_budget():
    def handler(request):
        raise httpx.ConnectError("refused", request=request)

    with pytest.raises(TransportError):
        _openai(handler).chat(_req())


# -- images / speech / audio ---------------------------------------------------


def _png(w, h):
    buf = io.BytesIO()
    Image.new("RGB", (w, h), (1, 2, 3)).save(buf, format="PNG")
    return buf.getvalue()


def test_mock_image_is_deterministic(tmp_path):
    p = MockImageProvider()
    a = p.generate_image("a cat", 3, 32, 16, tmp_path / "a.png", 1)
    b = p.generate_image("a cat", 3, 32, 16, tmp_path / "b.png", 1)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert (a.width, a.height) == (32, 16) and a.cache_key == b.cache_key
    with pytest.raises(PreconditionError):
        p.generate_image(" ", 0, 8, 8, tmp_path / "c.png")


def test_http_image_dimension_check(tmp_path):
    body = {}

    def handler(request):
        body.update(json.loads(request.content))
        return httpx.Response(200, content=_png(10, 10))

    p = HTTPImageProvider("http://img.test", transport=httpx.MockTransport(handler), retry=NO_SLEEP)
    asset = p.generate_image("x", 5, 10, 10, tmp_path / "x.png")
    assert body == {"prompt": "x", "seed": 5, "width": 10, "height": 10} and asset.width == 10
    with pytest.raises(DimensionMismatchError):
        p.generate_image("x", 5, 20, 10, tmp_path / "y.png")


def test_image_cache_avoids_second_call(tmp_path):
    p = MockImageProvider(cache=ResponseCache(tmp_path / "c"))
    p.generate_image("x", 1, 8, 8, tmp_path / "1.png")
    p.generate_image("x", 1, 8, 8, tmp_path / "2.png")
    assert p.upstream_calls == 1


def test_speech_duration_is_measured(tmp_path):
    asset = MockSpeechProvider(seconds_per_char=0.05).synthesize_speech("hello", "v", tmp_path / "s.wav", 1)
    assert math.isclose(asset.duration_s, 0.25)
    assert math.isclose(audio.wav_duration((tmp_path / "s.wav").read_bytes()), 0.25)


def test_http_speech_measures_returned_audio(tmp_path):
    wav = audio.encode_wav(audio.silence(1.5))
    p = HTTPSpeechProvider("http://tts.test", transport=httpx.MockTransport(lambda r: httpx.Response(200, content=wav)),
                           retry=NO_SLEEP)
    assert math.isclose(p.synthesize_speech("hi", "v", tmp_path / "s.wav").duration_s, 1.5)


def test_http_speech_rejects_non_audio(tmp_path):
    p = HTTPSpeechProvider("http://tts.test", transport=httpx.MockTransport(lambda r: httpx.Response(200, content=b"x")),
                           retry=NO_SLEEP)
    with pytest.raises(ProviderError):
        p.synthesize_speech("hi", "v", tmp_path / "s.wav")


def test_audio_generation(tmp_path):
    asset = MockAudioProvider().generate_audio("rain", 2.0, tmp_path / "a.wav", "sound", 3)
    assert asset.page_index == 3 and math.isclose(asset.duration_s, 2.0)
    with pytest.raises(PreconditionError):
        MockAudioProvider().generate_audio("rain", 0, tmp_path / "b.wav")
    wav = audio.encode_wav(audio.tone(0.5, 440))
    p = HTTPAudioProvider("http://aud.test", transport=httpx.MockTransport(lambda r: httpx.Response(200, content=wav)),
                          retry=NO_SLEEP)
    assert math.isclose(p.generate_audio("x", 0.5, tmp_path / "c.wav").duration_s, 0.5)


@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=200))
def test_wav_roundtrip(samples):
    data = audio.encode_wav(np.array(samples))
    decoded, sr = audio.decode_wav(data)
    assert sr == audio.DEFAULT_SAMPLE_RATE and len(decoded) == len(samples)
    assert np.allclose(decoded, samples, atol=1 / 32767 + 1e-9)


# -- retrieval ----------------------------------------------------------------


def test_search_query_preconditions():
    with pytest.raises(PreconditionError):
        SearchQuery("rain", limit=0)
    with pytest.raises(PreconditionError):
        SearchQuery("rain", min_duration_s=5, max_duration_s=2)


def test_mock_search_catalog(tmp_path):
    hits = {"rain": [SearchHit("1", "p1", 4.0), SearchHit("2", "p2", 60.0)]}
    p = MockSearchProvider(hits)
    found = p.search_audio(SearchQuery("heavy rain on a roof", limit=5))
    assert [h.id for h in found] == ["1"]
    assert p.search_audio(SearchQuery("thunder")) == []
    asset = p.fetch(found[0], tmp_path / "r.wav", "sound", 2)
    assert asset.provenance == "retrieved" and math.isclose(asset.duration_s, 4.0)


def test_freesound_missing_token(monkeypatch):
    monkeypatch.delenv("NO_SUCH_TOKEN", raising=False)
    client = FreesoundClient(token_env="NO_SUCH_TOKEN", retry=NO_SLEEP,
                             transport=httpx.MockTransport(lambda r: httpx.Response(200, json={})))
    with pytest.raises(AuthenticationError):
        client.search_audio(SearchQuery("rain"))


def test_freesound_search_request(monkeypatch):
    monkeypatch.setenv("FS_TOKEN", "t0k")
    seen = {}

    def handler(request):
        seen.update(dict(request.url.params))
        return httpx.Response(200, json={"results": [
            {"id": 7, "name": "rain", "duration": 5.5, "previews": {"preview-hq-mp3": "https://cdn.test/7.mp3"}},
        ]})

    client = FreesoundClient(token_env="FS_TOKEN", retry=NO_SLEEP, transport=httpx.MockTransport(handler))
    hits = client.search_audio(SearchQuery("rain on leaves"))
    assert hits == [SearchHit("7", "https://cdn.test/7.mp3", 5.5)]
    assert seen["query"] == "rain on leaves" and seen["token"] == "t0k"
    assert seen["filter"] == "duration:[3.0 TO 30.0]"


# -- embeddings ----------------------------------------------------------------


def test_cosine_properties():
    e = MockEmbeddingProvider()
    a = e.embed("image_text", Payload.text("a"))
    b = e.embed("image_text", Payload.text("b"))
    assert math.isclose(cosine_similarity(a, a), 1.0)
    assert math.isclose(cosine_similarity(a, b), cosine_similarity(b, a))
    assert -1 <= cosine_similarity(a, b) <= 1


def test_space_rules():
    e = MockEmbeddingProvider()
    with pytest.raises(SpaceMismatchError):
        e.embed("audio_text", Payload("image", b"x"))
    a = e.embed("image_text", Payload.text("a"))
    b = e.embed("audio_text", Payload.text("a"))
    with pytest.raises(SpaceMismatchError):
        cosine_similarity(a, b)


def test_zero_vector_rejected():
    with pytest.raises(NormalizationError):
        normalize([0.0, 0.0], "image_text")
    with pytest.raises(NormalizationError):
        MockEmbeddingProvider(lambda s, p: [0, 0, 0]).embed("image_text", Payload.text("x"))


def test_http_embedding(monkeypatch):
    bodies = []

    def handler(request):
        bodies.append(json.loads(request.content))
        return httpx.Response(200, json={"embedding": [3.0, 4.0]})

    e = HTTPEmbeddingProvider("http://emb.test", transport=httpx.MockTransport(handler), retry=NO_SLEEP)
    v = e.embed("audio_image", Payload("image", b"\x89PNG"))
    assert v.values == (0.6, 0.8)
    assert bodies[0]["space"] == "audio_image" and bodies[0]["modality"] == "image" and "data_b64" in bodies[0]
