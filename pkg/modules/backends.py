"""
文字起こしバックエンドモジュール
================================
各社ASRのHTTP APIと、保存済みレスポンスを返すオフラインの replay バックエンドを
同じインターフェース（transcribe / run_batch）で扱う。

* 非流暢性条件（omitted / retained）を各社のフラグに変換する（request_flags）
* 最短長の制限がある場合は送信前に無音パディング（RevAI は2秒）
* 処理時間はAPI呼び出し開始からレスポンス受信まで（アップロードとポーリングを含む）
* 失敗は例外ではなく FailureKind 付きの TranscriptionResult として返す
* 成功したレスポンスは cache/<backend>/<condition>/<sha256>.json に保存し、replay で再利用する

対応バックエンド
----------------
assemblyai, deepgram, revai, speechmatics, whisper_replicate, replay
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, Optional, Sequence

import requests

from config import (
    BACKEND_CONFIG,
    CACHE_DIR,
    CONDITIONS,
    DEFAULT_MAX_CONCURRENCY,
    DEFAULT_TIMEOUT_S,
    LIVE_BACKENDS,
    POLL_INTERVAL_S,
    TRANSPORT_RETRIES,
)
from modules.audio import pad_audio, wav_duration
from modules.corpus import Recording
from modules.errors import AsrBenchError, AudioFormatError, ConfigurationError

_LOGGER = logging.getLogger(__name__)

__all__ = [
    "FailureKind",
    "TranscriptionFailure",
    "BackendConfig",
    "TranscriptionResult",
    "request_flags",
    "audio_sha256",
    "cache_path",
    "read_cache",
    "write_cache",
    "check_credentials",
    "transcribe",
    "run_batch",
]


class FailureKind(str, Enum):
    AUTH = "auth"
    TIMEOUT = "timeout"
    REJECTED = "rejected"
    TRANSPORT = "transport"
    MISSING_FIXTURE = "missing_fixture"
    AUDIO_FORMAT = "audio_format"


class TranscriptionFailure(AsrBenchError):
    """1件の文字起こしの失敗（run_batch の外には出さない）"""

    def __init__(self, kind: FailureKind, message: str, status: Optional[int] = None):
        super().__init__(message)
        self.kind = kind
        self.status = status


@dataclass(frozen=True)
class BackendConfig:
    backend_id: str
    disfluency_condition: str = "retained"
    credentials_ref: Optional[str] = None
    initial_prompt: Optional[str] = None
    min_audio_seconds: Optional[float] = None
    timeout: float = DEFAULT_TIMEOUT_S
    max_concurrency: int = DEFAULT_MAX_CONCURRENCY
    cache_dir: Optional[str] = CACHE_DIR
    replay_of: Optional[str] = None  # replay のときの元ベンダー
    poll_interval: float = POLL_INTERVAL_S

    def __post_init__(self):
        if self.backend_id not in BACKEND_CONFIG:
            raise ConfigurationError(f"未知のバックエンドです: {self.backend_id}")
        if self.disfluency_condition not in CONDITIONS:
            raise ConfigurationError(f"条件は {CONDITIONS} のいずれかです: {self.disfluency_condition}")
        if self.initial_prompt is not None and self.vendor != "whisper_replicate":
            raise ConfigurationError("initial_prompt は whisper_replicate でのみ指定できます")
        if self.max_concurrency < 1:
            raise ConfigurationError(f"max_concurrency は1以上です: {self.max_concurrency}")
        if not self.timeout > 0:
            raise ConfigurationError(f"timeout は正の値です: {self.timeout}")
        if self.backend_id == "replay":
            if self.replay_of not in LIVE_BACKENDS:
                raise ConfigurationError(f"replay には元ベンダーの指定が必要です: {self.replay_of}")
            if not self.cache_dir:
                raise ConfigurationError("replay には cache_dir が必要です")
        elif self.replay_of is not None:
            raise ConfigurationError("replay_of は replay バックエンドでのみ指定できます")

    @classmethod
    def from_defaults(cls, backend_id: str, condition: str = "retained", **overrides) -> "BackendConfig":
        """config.BACKEND_CONFIG の既定値（環境変数名、最短長）を埋めて作る"""
        defaults = BACKEND_CONFIG.get(backend_id, {})
        values = {
            "credentials_ref": defaults.get("env_var"),
            "min_audio_seconds": defaults.get("min_audio_seconds"),
        }
        values.update(overrides)
        return cls(backend_id=backend_id, disfluency_condition=condition, **values)

    @property
    def vendor(self) -> str:
        """結果に記録するベンダー名（replay は元ベンダー）"""
        return self.replay_of if self.backend_id == "replay" else self.backend_id


@dataclass(frozen=True)
class TranscriptionResult:
    recording_id: str
    backend_id: str
    condition: str
    raw_text: Optional[str] = None
    processing_time: Optional[float] = None
    request_metadata: Dict[str, Any] = field(default_factory=dict)
    failure: Optional[FailureKind] = None
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.failure is None


# ---------------------------------------------------------------------------
# 条件→フラグ対応、キャッシュ
# ---------------------------------------------------------------------------

def request_flags(backend_id: str, condition: str, initial_prompt: Optional[str] = None) -> Dict[str, Any]:
    """
    非流暢性条件に応じて変わるリクエスト項目だけを返す。
    Note:
        - assemblyai: disfluencies=true で保持
        - deepgram: filler_words=true で保持
        - revai / speechmatics: remove_disfluencies=false で保持
        - whisper_replicate: 保持条件のときだけ initial_prompt を付ける
    """
    if condition not in CONDITIONS:
        raise ConfigurationError(f"条件は {CONDITIONS} のいずれかです: {condition}")
    retained = condition == "retained"
    if backend_id == "assemblyai":
        return {"disfluencies": retained}
    if backend_id == "deepgram":
        return {"filler_words": retained}
    if backend_id in ("revai", "speechmatics"):
        return {"remove_disfluencies": not retained}
    if backend_id == "whisper_replicate":
        return {"initial_prompt": initial_prompt} if retained and initial_prompt else {}
    if backend_id == "replay":
        return {}
    raise ConfigurationError(f"未知のバックエンドです: {backend_id}")


def audio_sha256(audio: bytes) -> str:
    return hashlib.sha256(audio).hexdigest()


def cache_path(cache_dir, backend_id: str, condition: str, digest: str) -> Path:
    return Path(cache_dir) / backend_id / condition / f"{digest}.json"


def read_cache(cache_dir, backend_id: str, condition: str, digest: str) -> Optional[Dict[str, Any]]:
    """キャッシュを読む。無ければ None"""
    path = cache_path(cache_dir, backend_id, condition, digest)
    if not path.is_file():
        return None
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


_CACHE_WRITE_LOCK = threading.Lock()


def write_cache(cache_dir, backend_id: str, condition: str, digest: str, entry: Dict[str, Any]) -> Path:
    """
    キャッシュを書く。書き込みは直列化し、一時ファイルからの置き換えで行う。
    entry: {raw_text, processing_time_s, captured_at, request_flags}
    """
    path = cache_path(cache_dir, backend_id, condition, digest)
    with _CACHE_WRITE_LOCK:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".json.tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(entry, f, ensure_ascii=False, sort_keys=True, indent=2)
        os.replace(tmp, path)
    return path


def check_credentials(configs: Sequence[BackendConfig]) -> None:
    """
    ライブバックエンドの認証情報が環境変数にあるか事前に確認する。
    Raises:
        ConfigurationError: 環境変数が未設定。
    """
    missing = sorted({
        c.credentials_ref or c.backend_id
        for c in configs
        if c.backend_id != "replay" and not (c.credentials_ref and os.environ.get(c.credentials_ref))
    })
    if missing:
        raise ConfigurationError(f"認証情報の環境変数が設定されていません: {', '.join(missing)}")


# ---------------------------------------------------------------------------
# HTTP ヘルパー
# ---------------------------------------------------------------------------

_thread_local = threading.local()


def _default_session() -> requests.Session:
    # スレッドごとに1つのセッションを使い回す
    session = getattr(_thread_local, "session", None)
    if session is None:
        session = requests.Session()
        _thread_local.session = session
    return session


@dataclass
class _Call:
    session: Any
    config: BackendConfig
    api_key: str
    deadline: float
    flags: Dict[str, Any]
    base_url: str = ""
    status: Optional[int] = None

    def request(self, method: str, url: str, **kwargs):
        remaining = self.deadline - time.perf_counter()
        if remaining <= 0:
            raise TranscriptionFailure(FailureKind.TIMEOUT, f"タイムアウト ({self.config.timeout}秒)")
        try:
            response = getattr(self.session, method)(url, timeout=remaining, **kwargs)
        except requests.Timeout as e:
            raise TranscriptionFailure(FailureKind.TIMEOUT, f"タイムアウト: {e}") from e
        except requests.RequestException as e:
            raise TranscriptionFailure(FailureKind.TRANSPORT, f"通信エラー: {e}") from e
        self.status = response.status_code
        _raise_for_status(response)
        return response

    def poll(self, fetch: Callable[[], Any], done: Callable[[Any], bool]):
        """done(値) が真になるまで一定間隔で fetch() を繰り返す"""
        while True:
            value = fetch()
            if done(value):
                return value
            if time.perf_counter() + self.config.poll_interval > self.deadline:
                raise TranscriptionFailure(FailureKind.TIMEOUT, f"ポーリングがタイムアウトしました ({self.config.timeout}秒)")
            time.sleep(self.config.poll_interval)


def _raise_for_status(response) -> None:
    status = response.status_code
    if status < 400:
        return
    detail = (getattr(response, "text", "") or "")[:200]
    if status in (401, 403):
        raise TranscriptionFailure(FailureKind.AUTH, f"認証エラー ({status}): {detail}", status)
    if status == 408:
        raise TranscriptionFailure(FailureKind.TIMEOUT, f"タイムアウト ({status}): {detail}", status)
    if status >= 500 or status == 429:
        raise TranscriptionFailure(FailureKind.TRANSPORT, f"サーバーエラー ({status}): {detail}", status)
    raise TranscriptionFailure(FailureKind.REJECTED, f"リクエストが拒否されました ({status}): {detail}", status)


# ---------------------------------------------------------------------------
# ベンダー別アダプター（音声バイト列 → 生テキスト）
# ---------------------------------------------------------------------------

def _assemblyai(call: _Call, audio: bytes, filename: str) -> str:
    headers = {"authorization": call.api_key}
    upload = call.request("post", f"{call.base_url}/upload", headers=headers, data=audio).json()
    body = {"audio_url": upload["upload_url"], **call.flags}
    job = call.request("post", f"{call.base_url}/transcript", headers=headers, json=body).json()

    def fetch():
        return call.request("get", f"{call.base_url}/transcript/{job['id']}", headers=headers).json()

    result = call.poll(fetch, lambda r: r.get("status") in ("completed", "error"))
    if result["status"] == "error":
        raise TranscriptionFailure(FailureKind.REJECTED, f"AssemblyAI: {result.get('error')}")
    return result.get("text") or ""


def _deepgram(call: _Call, audio: bytes, filename: str) -> str:
    settings = BACKEND_CONFIG["deepgram"]
    headers = {"Authorization": f"Token {call.api_key}", "Content-Type": "audio/wav"}
    params = {"model": settings["model"], "punctuate": "true"}
    params.update({k: str(v).lower() for k, v in call.flags.items()})
    data = call.request("post", f"{call.base_url}/listen", headers=headers, params=params, data=audio).json()
    return data["results"]["channels"][0]["alternatives"][0].get("transcript") or ""


def _revai(call: _Call, audio: bytes, filename: str) -> str:
    headers = {"Authorization": f"Bearer {call.api_key}"}
    job = call.request(
        "post",
        f"{call.base_url}/jobs",
        headers=headers,
        files={"media": (filename, audio, "audio/wav")},
        data={"options": json.dumps(call.flags)},
    ).json()

    def fetch():
        return call.request("get", f"{call.base_url}/jobs/{job['id']}", headers=headers).json()

    status = call.poll(fetch, lambda r: r.get("status") in ("transcribed", "failed"))
    if status["status"] == "failed":
        raise TranscriptionFailure(FailureKind.REJECTED, f"RevAI: {status.get('failure_detail') or status.get('failure')}")
    # テキスト形式は行頭に "Speaker 0    00:00:00" が付く（正規化で除去）
    transcript = call.request(
        "get",
        f"{call.base_url}/jobs/{job['id']}/transcript",
        headers={**headers, "Accept": "text/plain"},
    )
    return transcript.text


def _speechmatics(call: _Call, audio: bytes, filename: str) -> str:
    settings = BACKEND_CONFIG["speechmatics"]
    headers = {"Authorization": f"Bearer {call.api_key}"}
    job_config = {
        "type": "transcription",
        "transcription_config": {
            "language": settings["language"],
            "transcript_filtering_config": dict(call.flags),
        },
    }
    job = call.request(
        "post",
        f"{call.base_url}/jobs",
        headers=headers,
        files={"data_file": (filename, audio, "audio/wav")},
        data={"config": json.dumps(job_config)},
    ).json()

    def fetch():
        return call.request("get", f"{call.base_url}/jobs/{job['id']}", headers=headers).json()

    status = call.poll(fetch, lambda r: r.get("job", {}).get("status") in ("done", "rejected"))
    if status["job"]["status"] == "rejected":
        raise TranscriptionFailure(FailureKind.REJECTED, f"Speechmatics: {status['job'].get('errors')}")
    transcript = call.request(
        "get", f"{call.base_url}/jobs/{job['id']}/transcript", headers=headers, params={"format": "txt"}
    )
    return transcript.text


def _whisper_replicate(call: _Call, audio: bytes, filename: str) -> str:
    settings = BACKEND_CONFIG["whisper_replicate"]
    headers = {"Authorization": f"Bearer {call.api_key}"}
    data_uri = "data:audio/wav;base64," + base64.b64encode(audio).decode("ascii")
    body = {"input": {"audio": data_uri, "model": settings["model"], **call.flags}}
    prediction = call.request(
        "post", f"{call.base_url}/models/{settings['model_path']}/predictions", headers=headers, json=body
    ).json()

    def fetch():
        return call.request("get", f"{call.base_url}/predictions/{prediction['id']}", headers=headers).json()

    result = call.poll(fetch, lambda r: r.get("status") in ("succeeded", "failed", "canceled"))
    if result["status"] != "succeeded":
        raise TranscriptionFailure(FailureKind.REJECTED, f"Replicate: {result.get('error') or result['status']}")
    return (result.get("output") or {}).get("transcription") or ""


_ADAPTERS: Dict[str, Callable[[_Call, bytes, str], str]] = {
    "assemblyai": _assemblyai,
    "deepgram": _deepgram,
    "revai": _revai,
    "speechmatics": _speechmatics,
    "whisper_replicate": _whisper_replicate,
}


# ---------------------------------------------------------------------------
# 公開API
# ---------------------------------------------------------------------------

def _failure(config: BackendConfig, recording_id: str, error: TranscriptionFailure, metadata: dict) -> TranscriptionResult:
    _LOGGER.warning(
        "文字起こし失敗 [%s/%s] %s: %s",
        config.vendor, config.disfluency_condition, error.kind.value, error,
        extra={"recording_id": recording_id},
    )
    return TranscriptionResult(
        recording_id=recording_id,
        backend_id=config.vendor,
        condition=config.disfluency_condition,
        request_metadata=metadata,
        failure=error.kind,
        message=str(error),
    )


def _replay(config: BackendConfig, recording_id: str, digest: str) -> TranscriptionResult:
    entry = read_cache(config.cache_dir, config.replay_of, config.disfluency_condition, digest)
    if entry is None:
        path = cache_path(config.cache_dir, config.replay_of, config.disfluency_condition, digest)
        raise TranscriptionFailure(FailureKind.MISSING_FIXTURE, f"キャッシュがありません: {path}")
    return TranscriptionResult(
        recording_id=recording_id,
        backend_id=config.replay_of,
        condition=config.disfluency_condition,
        raw_text=entry["raw_text"],
        processing_time=float(entry["processing_time_s"]),
        request_metadata={
            "replayed": True,
            "retries": 0,
            "captured_at": entry.get("captured_at"),
            "request_flags": entry.get("request_flags", {}),
        },
    )


def transcribe(
    config: BackendConfig,
    audio_path,
    recording_id: Optional[str] = None,
    session=None,
) -> TranscriptionResult:
    """
    1つの音声ファイルを文字起こしする。
    Args:
        config (BackendConfig): バックエンド設定。
        audio_path: PCM WAV ファイル。
        recording_id (str | None): ログと結果に使うID（省略時はファイル名）。
        session: requests.Session 互換オブジェクト（テストでは偽物を渡す）。
    Returns:
        TranscriptionResult: ベンダーの生テキスト（正規化前）と処理時間。失敗時は failure を設定。
    Note:
        - 通信エラーのときだけ1回リトライし、request_metadata["retried"] を立てる。
          処理時間は最後に成功した試行のもの。
        - キャッシュのキーはパディング前の音声のSHA-256。
    """
    recording_id = recording_id or Path(audio_path).stem
    flags = request_flags(config.vendor, config.disfluency_condition, config.initial_prompt)
    metadata: Dict[str, Any] = {"request_flags": flags, "retries": 0, "retried": False}

    try:
        audio = Path(audio_path).read_bytes()
    except OSError as e:
        return _failure(config, recording_id, TranscriptionFailure(FailureKind.AUDIO_FORMAT, f"音声を読めません: {e}"), metadata)
    digest = audio_sha256(audio)

    try:
        if config.backend_id == "replay":
            return _replay(config, recording_id, digest)

        payload = audio
        if config.min_audio_seconds:
            duration = wav_duration(audio)
            if duration < config.min_audio_seconds:
                payload = pad_audio(audio, config.min_audio_seconds)
                metadata["padded_from_s"] = duration
                _LOGGER.info(
                    "%.2f秒の音声を%.1f秒にパディング", duration, config.min_audio_seconds,
                    extra={"recording_id": recording_id},
                )
    except AudioFormatError as e:
        return _failure(config, recording_id, TranscriptionFailure(FailureKind.AUDIO_FORMAT, str(e)), metadata)
    except TranscriptionFailure as e:
        return _failure(config, recording_id, e, metadata)

    api_key = os.environ.get(config.credentials_ref or "")
    if not api_key:
        error = TranscriptionFailure(FailureKind.AUTH, f"環境変数 {config.credentials_ref} が未設定です")
        return _failure(config, recording_id, error, metadata)

    adapter = _ADAPTERS[config.backend_id]
    session = session or _default_session()
    filename = Path(audio_path).name

    attempt = 0
    while True:
        # 計測はワーカーでAPI呼び出しを始める直前から（キュー待ちは含めない）
        started = time.perf_counter()
        call = _Call(
            session=session,
            config=config,
            api_key=api_key,
            deadline=started + config.timeout,
            flags=flags,
            base_url=BACKEND_CONFIG[config.backend_id]["base_url"],
        )
        try:
            text = adapter(call, payload, filename)
            elapsed = time.perf_counter() - started
            break
        except TranscriptionFailure as e:
            metadata["status"] = e.status or call.status
            if e.kind == FailureKind.TRANSPORT and attempt < TRANSPORT_RETRIES:
                attempt += 1
                metadata["retries"] = attempt
                metadata["retried"] = True
                _LOGGER.info("通信エラーのため再試行します: %s", e, extra={"recording_id": recording_id})
                continue
            return _failure(config, recording_id, e, metadata)
        except (KeyError, ValueError, TypeError) as e:
            # 想定外のレスポンス形式
            metadata["status"] = call.status
            error = TranscriptionFailure(FailureKind.REJECTED, f"レスポンスを解釈できません: {e!r}")
            return _failure(config, recording_id, error, metadata)

    metadata["status"] = call.status
    metadata["captured_at"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    if config.cache_dir:
        write_cache(config.cache_dir, config.backend_id, config.disfluency_condition, digest, {
            "raw_text": text,
            "processing_time_s": elapsed,
            "captured_at": metadata["captured_at"],
            "request_flags": flags,
        })

    _LOGGER.debug("文字起こし完了 [%s] %.2f秒", config.backend_id, elapsed, extra={"recording_id": recording_id})
    return TranscriptionResult(
        recording_id=recording_id,
        backend_id=config.backend_id,
        condition=config.disfluency_condition,
        raw_text=text,
        processing_time=elapsed,
        request_metadata=metadata,
    )


def _transcribe_isolated(config: BackendConfig, recording: Recording, session) -> TranscriptionResult:
    try:
        return transcribe(config, recording.audio_path, recording_id=recording.recording_id, session=session)
    except Exception as e:  # バッチ全体は止めない
        _LOGGER.exception("予期しないエラー", extra={"recording_id": recording.recording_id})
        error = TranscriptionFailure(FailureKind.TRANSPORT, f"予期しないエラー: {e!r}")
        return _failure(config, recording.recording_id, error, {})


def run_batch(
    configs: Sequence[BackendConfig],
    recordings: Sequence[Recording],
    session=None,
) -> Iterator[TranscriptionResult]:
    """
    全 (設定, 録音) の組を文字起こしし、終わった順に結果を返す。
    Note:
        - スレッドプールはベンダーごとに1つ。条件違いの設定も同じプールを共有し、
          同時実行数はそのベンダーの設定の max_concurrency の最小値以下に保つ。
        - 各組は結果か型付きの失敗を必ずちょうど1つ返す。
        - 処理時間はワーカー内で計測を始めるので、キュー待ちの時間は入らない。
    """
    if not configs or not recordings:
        return

    limits: Dict[str, int] = {}
    for config in configs:
        limits[config.vendor] = min(limits.get(config.vendor, config.max_concurrency), config.max_concurrency)

    pools: Dict[str, ThreadPoolExecutor] = {}
    futures = []
    try:
        for vendor, limit in limits.items():
            pools[vendor] = ThreadPoolExecutor(max_workers=limit, thread_name_prefix=f"asr-{vendor}")
        for config in configs:
            pool = pools[config.vendor]
            futures.extend(pool.submit(_transcribe_isolated, config, rec, session) for rec in recordings)
        _LOGGER.info("文字起こし開始: %d 件 (%d 設定、%d ベンダー)", len(futures), len(configs), len(pools))
        for future in as_completed(futures):
            yield future.result()
    finally:
        for pool in pools.values():
            pool.shutdown(wait=True, cancel_futures=True)
