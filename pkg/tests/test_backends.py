import io
import json
import threading
import time
import wave
from pathlib import Path

import pytest
import requests

from modules.audio import wav_duration
from modules.backends import (
    BackendConfig,
    FailureKind,
    audio_sha256,
    cache_path,
    check_credentials,
    read_cache,
    request_flags,
    run_batch,
    transcribe,
    write_cache,
)
from modules.corpus import Recording
from modules.errors import ConfigurationError


class FakeResponse:
    def __init__(self, status_code=200, payload=None, text=""):
        self.status_code = status_code
        self._payload = payload
        self.text = text

    def json(self):
        return self._payload


class FakeSession:
    """requests.Session の代わり。呼び出しを記録し、handler の返り値を返す"""

    def __init__(self, handler):
        self.handler = handler
        self.calls = []
        self._lock = threading.Lock()

    def _call(self, method, url, **kwargs):
        with self._lock:
            self.calls.append((method, url, kwargs))
        return self.handler(method, url, kwargs)

    def get(self, url, **kwargs):
        return self._call("get", url, **kwargs)

    def post(self, url, **kwargs):
        return self._call("post", url, **kwargs)


def _wav(path: Path, seconds: float, rate: int = 16000) -> Path:
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(b"\x01\x00" * int(seconds * rate))
    path.write_bytes(buf.getvalue())
    return path


def _deepgram_handler(transcript="um hello world"):
    def handler(method, url, kwargs):
        assert url.endswith("/listen")
        return FakeResponse(payload={"results": {"channels": [{"alternatives": [{"transcript": transcript}]}]}})
    return handler


@pytest.fixture
def audio(tmp_path):
    return _wav(tmp_path / "clip.wav", 0.75)


@pytest.fixture
def cache_dir(tmp_path):
    return str(tmp_path / "cache")


@pytest.mark.parametrize("backend, omitted, retained", [
    ("assemblyai", {"disfluencies": False}, {"disfluencies": True}),
    ("deepgram", {"filler_words": False}, {"filler_words": True}),
    ("revai", {"remove_disfluencies": True}, {"remove_disfluencies": False}),
    ("speechmatics", {"remove_disfluencies": True}, {"remove_disfluencies": False}),
    ("whisper_replicate", {}, {}),
])
def test_request_flags_by_condition(backend, omitted, retained):
    assert request_flags(backend, "omitted") == omitted
    assert request_flags(backend, "retained") == retained


def test_whisper_prompt_only_when_retained():
    prompt = "Umm, let me think like, hmm... Okay, here's what I'm, like, thinking."
    assert request_flags("whisper_replicate", "retained", prompt) == {"initial_prompt": prompt}
    assert request_flags("whisper_replicate", "omitted", prompt) == {}


def test_request_flags_rejects_unknown_values():
    with pytest.raises(ConfigurationError):
        request_flags("deepgram", "verbatim")
    with pytest.raises(ConfigurationError):
        request_flags("nobody", "retained")


def test_backend_config_defaults():
    config = BackendConfig.from_defaults("revai", "omitted")
    assert config.credentials_ref == "ASRBENCH_REVAI_KEY"
    assert config.min_audio_seconds == 2.0
    assert config.vendor == "revai"
    replay = BackendConfig.from_defaults("replay", "retained", replay_of="deepgram")
    assert replay.vendor == "deepgram"
    assert replay.credentials_ref is None


@pytest.mark.parametrize("kwargs", [
    {"backend_id": "nobody"},
    {"backend_id": "deepgram", "disfluency_condition": "verbatim"},
    {"backend_id": "deepgram", "initial_prompt": "um"},
    {"backend_id": "deepgram", "max_concurrency": 0},
    {"backend_id": "deepgram", "timeout": 0},
    {"backend_id": "replay"},
    {"backend_id": "replay", "replay_of": "deepgram", "cache_dir": None},
    {"backend_id": "deepgram", "replay_of": "revai"},
])
def test_backend_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        BackendConfig(**kwargs)


def test_check_credentials(monkeypatch):
    monkeypatch.delenv("ASRBENCH_DEEPGRAM_KEY", raising=False)
    configs = [BackendConfig.from_defaults("deepgram"), BackendConfig.from_defaults("replay", replay_of="revai")]
    with pytest.raises(ConfigurationError, match="ASRBENCH_DEEPGRAM_KEY"):
        check_credentials(configs)
    monkeypatch.setenv("ASRBENCH_DEEPGRAM_KEY", "secret")
    check_credentials(configs)


def test_cache_round_trip(tmp_path):
    entry = {"raw_text": "hello", "processing_time_s": 1.5, "captured_at": "2024-05-01T00:00:00+00:00",
             "request_flags": {"filler_words": True}}
    path = write_cache(tmp_path, "deepgram", "retained", "abc", entry)
    assert path == tmp_path / "deepgram" / "retained" / "abc.json"
    assert read_cache(tmp_path, "deepgram", "retained", "abc") == entry
    assert read_cache(tmp_path, "deepgram", "omitted", "abc") is None


def test_deepgram_transcribe_writes_cache_and_replays(monkeypatch, audio, cache_dir):
    monkeypatch.setenv("ASRBENCH_DEEPGRAM_KEY", "secret")
    session = FakeSession(_deepgram_handler())
    config = BackendConfig.from_defaults("deepgram", "omitted", cache_dir=cache_dir)

    result = transcribe(config, audio, recording_id="clip", session=session)

    assert result.ok
    assert result.raw_text == "um hello world"
    assert result.processing_time >= 0
    assert result.request_metadata["request_flags"] == {"filler_words": False}
    assert result.request_metadata["retried"] is False
    method, url, kwargs = session.calls[0]
    assert kwargs["params"]["filler_words"] == "false"
    assert kwargs["params"]["model"] == "nova-2"
    assert kwargs["headers"]["Authorization"] == "Token secret"

    digest = audio_sha256(audio.read_bytes())
    assert cache_path(cache_dir, "deepgram", "omitted", digest).is_file()

    replay = BackendConfig.from_defaults("replay", "omitted", replay_of="deepgram", cache_dir=cache_dir)
    replayed = transcribe(replay, audio, recording_id="clip")
    assert replayed.ok
    assert replayed.backend_id == "deepgram"
    assert replayed.raw_text == "um hello world"
    assert replayed.processing_time == result.processing_time
    assert replayed.request_metadata["replayed"] is True


def test_replay_missing_fixture(audio, cache_dir):
    config = BackendConfig.from_defaults("replay", "retained", replay_of="assemblyai", cache_dir=cache_dir)
    result = transcribe(config, audio)
    assert result.failure == FailureKind.MISSING_FIXTURE
    assert result.recording_id == "clip"
    assert result.backend_id == "assemblyai"


def test_revai_pads_short_audio(monkeypatch, audio, cache_dir):
    monkeypatch.setenv("ASRBENCH_REVAI_KEY", "secret")
    sent = {}

    def handler(method, url, kwargs):
        if method == "post":
            sent["media"] = kwargs["files"]["media"][1]
            sent["options"] = json.loads(kwargs["data"]["options"])
            return FakeResponse(payload={"id": "job1", "status": "in_progress"})
        if url.endswith("/transcript"):
            assert kwargs["headers"]["Accept"] == "text/plain"
            return FakeResponse(text="Speaker 0    00:00:00    Um, hello.")
        return FakeResponse(payload={"id": "job1", "status": "transcribed"})

    config = BackendConfig.from_defaults("revai", "retained", cache_dir=cache_dir, poll_interval=0.0)
    result = transcribe(config, audio, session=FakeSession(handler))

    assert result.ok
    assert result.raw_text == "Speaker 0    00:00:00    Um, hello."
    assert wav_duration(sent["media"]) == 2.0
    assert sent["options"] == {"remove_disfluencies": False}
    assert result.request_metadata["padded_from_s"] == 0.75
    # キャッシュのキーはパディング前の音声
    digest = audio_sha256(audio.read_bytes())
    assert read_cache(cache_dir, "revai", "retained", digest)["raw_text"] == result.raw_text


def test_assemblyai_polls_until_completed(monkeypatch, audio):
    monkeypatch.setenv("ASRBENCH_ASSEMBLYAI_KEY", "secret")
    statuses = iter(["queued", "processing", "completed"])
    bodies = []

    def handler(method, url, kwargs):
        if url.endswith("/upload"):
            return FakeResponse(payload={"upload_url": "https://cdn/x"})
        if method == "post":
            bodies.append(kwargs["json"])
            return FakeResponse(payload={"id": "t1"})
        status = next(statuses)
        return FakeResponse(payload={"status": status, "text": "Um, hi." if status == "completed" else None})

    config = BackendConfig.from_defaults("assemblyai", "retained", cache_dir=None, poll_interval=0.0)
    result = transcribe(config, audio, session=FakeSession(handler))
    assert result.raw_text == "Um, hi."
    assert bodies == [{"audio_url": "https://cdn/x", "disfluencies": True}]


def test_speechmatics_sends_filtering_config(monkeypatch, audio):
    monkeypatch.setenv("ASRBENCH_SPEECHMATICS_KEY", "secret")
    sent = {}

    def handler(method, url, kwargs):
        if method == "post":
            sent["config"] = json.loads(kwargs["data"]["config"])
            return FakeResponse(payload={"id": "j1"})
        if url.endswith("/transcript"):
            assert kwargs["params"] == {"format": "txt"}
            return FakeResponse(text="hello there")
        return FakeResponse(payload={"job": {"status": "done"}})

    config = BackendConfig.from_defaults("speechmatics", "omitted", cache_dir=None, poll_interval=0.0)
    result = transcribe(config, audio, session=FakeSession(handler))
    assert result.raw_text == "hello there"
    filtering = sent["config"]["transcription_config"]["transcript_filtering_config"]
    assert filtering == {"remove_disfluencies": True}


def test_whisper_initial_prompt_in_request(monkeypatch, audio):
    monkeypatch.setenv("ASRBENCH_REPLICATE_KEY", "secret")
    bodies = []

    def handler(method, url, kwargs):
        if method == "post":
            assert url.endswith("/models/openai/whisper/predictions")
            bodies.append(kwargs["json"])
            return FakeResponse(payload={"id": "p1", "status": "starting"})
        return FakeResponse(payload={"status": "succeeded", "output": {"transcription": " um hi"}})

    config = BackendConfig.from_defaults(
        "whisper_replicate", "retained", cache_dir=None, poll_interval=0.0, initial_prompt="Umm, like, hmm."
    )
    result = transcribe(config, audio, session=FakeSession(handler))
    assert result.raw_text == " um hi"
    assert bodies[0]["input"]["initial_prompt"] == "Umm, like, hmm."
    assert bodies[0]["input"]["audio"].startswith("data:audio/wav;base64,")


def test_transport_error_retried_once(monkeypatch, audio):
    monkeypatch.setenv("ASRBENCH_DEEPGRAM_KEY", "secret")
    attempts = []

    def handler(method, url, kwargs):
        attempts.append(url)
        if len(attempts) == 1:
            raise requests.ConnectionError("reset by peer")
        return _deepgram_handler("hello")(method, url, kwargs)

    config = BackendConfig.from_defaults("deepgram", "retained", cache_dir=None)
    result = transcribe(config, audio, session=FakeSession(handler))
    assert result.ok
    assert result.request_metadata["retried"] is True
    assert result.request_metadata["retries"] == 1
    assert len(attempts) == 2


def test_transport_error_twice_fails(monkeypatch, audio):
    monkeypatch.setenv("ASRBENCH_DEEPGRAM_KEY", "secret")

    def handler(method, url, kwargs):
        return FakeResponse(status_code=503, text="unavailable")

    session = FakeSession(handler)
    config = BackendConfig.from_defaults("deepgram", "retained", cache_dir=None)
    result = transcribe(config, audio, session=session)
    assert result.failure == FailureKind.TRANSPORT
    assert result.request_metadata["status"] == 503
    assert len(session.calls) == 2


@pytest.mark.parametrize("status, kind", [
    (401, FailureKind.AUTH),
    (403, FailureKind.AUTH),
    (400, FailureKind.REJECTED),
    (408, FailureKind.TIMEOUT),
])
def test_http_status_mapping(monkeypatch, audio, status, kind):
    monkeypatch.setenv("ASRBENCH_DEEPGRAM_KEY", "secret")
    session = FakeSession(lambda m, u, k: FakeResponse(status_code=status, text="nope"))
    config = BackendConfig.from_defaults("deepgram", "retained", cache_dir=None)
    result = transcribe(config, audio, session=session)
    assert result.failure == kind
    assert len(session.calls) == 1


def test_request_timeout_maps_to_timeout(monkeypatch, audio):
    monkeypatch.setenv("ASRBENCH_DEEPGRAM_KEY", "secret")

    def handler(method, url, kwargs):
        raise requests.ReadTimeout("slow")

    config = BackendConfig.from_defaults("deepgram", "retained", cache_dir=None)
    result = transcribe(config, audio, session=FakeSession(handler))
    assert result.failure == FailureKind.TIMEOUT


def test_polling_deadline(monkeypatch, audio):
    monkeypatch.setenv("ASRBENCH_ASSEMBLYAI_KEY", "secret")

    def handler(method, url, kwargs):
        if url.endswith("/upload"):
            return FakeResponse(payload={"upload_url": "u"})
        if method == "post":
            return FakeResponse(payload={"id": "t1"})
        return FakeResponse(payload={"status": "processing"})

    config = BackendConfig.from_defaults(
        "assemblyai", "retained", cache_dir=None, poll_interval=0.01, timeout=0.05
    )
    result = transcribe(config, audio, session=FakeSession(handler))
    assert result.failure == FailureKind.TIMEOUT


def test_missing_key_is_auth_failure(monkeypatch, audio):
    monkeypatch.delenv("ASRBENCH_DEEPGRAM_KEY", raising=False)
    session = FakeSession(_deepgram_handler())
    result = transcribe(BackendConfig.from_defaults("deepgram"), audio, session=session)
    assert result.failure == FailureKind.AUTH
    assert session.calls == []


def test_bad_audio(monkeypatch, tmp_path):
    monkeypatch.setenv("ASRBENCH_REVAI_KEY", "secret")
    broken = tmp_path / "broken.wav"
    broken.write_bytes(b"not audio")
    config = BackendConfig.from_defaults("revai", cache_dir=None)
    assert transcribe(config, broken).failure == FailureKind.AUDIO_FORMAT
    assert transcribe(config, tmp_path / "missing.wav").failure == FailureKind.AUDIO_FORMAT


def test_run_batch_yields_one_result_per_pair(tmp_path, cache_dir):
    recordings = []
    for n in range(3):
        path = _wav(tmp_path / f"r{n}.wav", 0.1 * (n + 1))
        recordings.append(Recording(f"r{n}", "S1", str(path), 0.1 * (n + 1), None, "read"))
        if n < 2:
            digest = audio_sha256(path.read_bytes())
            write_cache(cache_dir, "deepgram", "retained", digest,
                        {"raw_text": f"text {n}", "processing_time_s": 1.0 + n})

    configs = [
        BackendConfig.from_defaults("replay", "retained", replay_of="deepgram", cache_dir=cache_dir, max_concurrency=2),
        BackendConfig.from_defaults("replay", "omitted", replay_of="deepgram", cache_dir=cache_dir),
    ]
    results = list(run_batch(configs, recordings))

    assert len(results) == 6
    ok = sorted((r.recording_id, r.condition) for r in results if r.ok)
    assert ok == [("r0", "retained"), ("r1", "retained")]
    failures = [r for r in results if not r.ok]
    assert all(r.failure == FailureKind.MISSING_FIXTURE for r in failures)


def test_run_batch_empty_inputs():
    assert list(run_batch([], [])) == []


def test_run_batch_shares_vendor_limit_across_conditions(monkeypatch, tmp_path):
    monkeypatch.setenv("ASRBENCH_DEEPGRAM_KEY", "secret")
    lock = threading.Lock()
    state = {"in_flight": 0, "peak": 0}

    def handler(method, url, kwargs):
        with lock:
            state["in_flight"] += 1
            state["peak"] = max(state["peak"], state["in_flight"])
        time.sleep(0.02)
        with lock:
            state["in_flight"] -= 1
        return _deepgram_handler("hi")(method, url, kwargs)

    recordings = [
        Recording(f"r{n}", "S1", str(_wav(tmp_path / f"r{n}.wav", 0.1)), 0.1, None, "read") for n in range(6)
    ]
    configs = [
        BackendConfig.from_defaults("deepgram", condition, cache_dir=None, max_concurrency=1)
        for condition in ("omitted", "retained")
    ]
    results = list(run_batch(configs, recordings, session=FakeSession(handler)))

    assert len(results) == 12
    assert all(r.ok for r in results)
    assert state["peak"] == 1


def _vendor_handler(vendor):
    """ベンダーごとに成功応答を返す handler"""
    def handler(method, url, kwargs):
        if vendor == "assemblyai":
            if url.endswith("/upload"):
                return FakeResponse(payload={"upload_url": "https://cdn/x"})
            if method == "post":
                return FakeResponse(payload={"id": "t1"})
            return FakeResponse(payload={"status": "completed", "text": "hi"})
        if vendor == "deepgram":
            return _deepgram_handler("hi")(method, url, kwargs)
        if vendor in ("revai", "speechmatics"):
            if method == "post":
                return FakeResponse(payload={"id": "j1"})
            if url.endswith("/transcript"):
                return FakeResponse(text="hi")
            return FakeResponse(payload={"status": "transcribed", "job": {"status": "done"}})
        if method == "post":
            return FakeResponse(payload={"id": "p1", "status": "starting"})
        return FakeResponse(payload={"status": "succeeded", "output": {"transcription": "hi"}})
    return handler


def _flatten(value, path=()):
    """リクエスト引数を (パス, 値) の辞書に展開する。JSON 文字列は中身まで展開"""
    if isinstance(value, str) and value.startswith("{"):
        value = json.loads(value)
    if isinstance(value, dict):
        leaves = {}
        for key, item in value.items():
            leaves.update(_flatten(item, path + (key,)))
        return leaves
    return {".".join(str(p) for p in path): value}


def _captured_requests(monkeypatch, audio, vendor, condition):
    for settings in ("ASSEMBLYAI", "DEEPGRAM", "REVAI", "SPEECHMATICS", "REPLICATE"):
        monkeypatch.setenv(f"ASRBENCH_{settings}_KEY", "secret")
    overrides = {"initial_prompt": "man woman suitcase city um uh"} if vendor == "whisper_replicate" else {}
    config = BackendConfig.from_defaults(vendor, condition, cache_dir=None, poll_interval=0.0, **overrides)
    session = FakeSession(_vendor_handler(vendor))
    assert transcribe(config, audio, session=session).ok
    leaves = {}
    for index, (method, url, kwargs) in enumerate(session.calls):
        # timeout は締め切りまでの残り時間なので比較しない
        sent = {key: value for key, value in kwargs.items() if key != "timeout"}
        leaves.update(_flatten(sent, (index, method, url)))
    return leaves


@pytest.mark.parametrize("vendor, flag, omitted, retained", [
    ("assemblyai", "json.disfluencies", False, True),
    ("deepgram", "params.filler_words", "false", "true"),
    ("revai", "data.options.remove_disfluencies", True, False),
    ("speechmatics", "data.config.transcription_config.transcript_filtering_config.remove_disfluencies", True, False),
    ("whisper_replicate", "json.input.initial_prompt", None, "man woman suitcase city um uh"),
])
def test_conditions_differ_only_in_documented_flag(monkeypatch, audio, vendor, flag, omitted, retained):
    sent_omitted = _captured_requests(monkeypatch, audio, vendor, "omitted")
    sent_retained = _captured_requests(monkeypatch, audio, vendor, "retained")

    differing = sorted(
        path for path in set(sent_omitted) | set(sent_retained)
        if sent_omitted.get(path) != sent_retained.get(path)
    )
    assert len(differing) == 1
    assert differing[0].endswith("." + flag)
    assert sent_omitted.get(differing[0]) == omitted
    assert sent_retained.get(differing[0]) == retained
