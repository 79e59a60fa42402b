"""
音声前処理モジュール
PCM WAV の長さ取得と末尾への無音パディング
"""
from __future__ import annotations

import io
import logging
import math
import os
import struct
import wave
from pathlib import Path
from typing import Union

from modules.errors import AudioFormatError

_LOGGER = logging.getLogger(__name__)

WavSource = Union[bytes, str, os.PathLike]

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def _plain_pcm(data: bytes) -> bytes:
    """
    WAVE_FORMAT_EXTENSIBLE で中身が PCM の fmt チャンクを、通常の PCM のタグに書き換える。
    Note:
        Python 3.11 の wave は拡張形式を読めない。サンプルとチャンク構成はそのまま。
    """
    if data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        return data
    offset = 12
    while offset + 8 <= len(data):
        chunk_id, size = struct.unpack_from("<4sI", data, offset)
        if chunk_id == b"fmt ":
            body = offset + 8
            if size < 40 or body + 40 > len(data):
                return data
            if struct.unpack_from("<H", data, body)[0] != WAVE_FORMAT_EXTENSIBLE:
                return data
            # SubFormat GUID の先頭2バイトが実際の形式
            if struct.unpack_from("<H", data, body + 24)[0] != WAVE_FORMAT_PCM:
                return data
            patched = bytearray(data)
            struct.pack_into("<H", patched, body, WAVE_FORMAT_PCM)
            return bytes(patched)
        offset += 8 + size + (size & 1)
    return data


def _open(source: WavSource) -> wave.Wave_read:
    try:
        data = bytes(source) if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    except OSError as e:
        raise AudioFormatError(f"WAVを読めません: {e}") from e
    try:
        return wave.open(io.BytesIO(_plain_pcm(data)), "rb")
    except (wave.Error, EOFError) as e:
        raise AudioFormatError(f"WAVヘッダーを解析できません: {e}") from e


def wav_duration(source: WavSource) -> float:
    """WAVの長さ（秒）"""
    with _open(source) as w:
        return w.getnframes() / w.getframerate()


def _target_frames(target_seconds: float, framerate: int) -> int:
    # 2.0 * 16000 のような値が浮動小数点誤差で1フレーム増えないよう丸めてから切り上げる
    return int(math.ceil(round(target_seconds * framerate, 6)))


def pad_audio(wav_in: bytes, target_seconds: float) -> bytes:
    """
    WAVの末尾に無音を足して target_seconds 以上にする。
    Args:
        wav_in (bytes): PCM WAV（8/16/24/32ビット、任意のサンプルレート、モノラル/ステレオ）。
        target_seconds (float): 目標の長さ（秒）。
    Returns:
        bytes: 既に十分長ければ入力そのもの。そうでなければ ceil(target * rate) フレームのWAV。
    Raises:
        AudioFormatError: ヘッダーが壊れている、またはデータが途中で切れている。
    Note:
        - 既存のサンプルは1ビットも変えない（出力の先頭は入力と同じサンプル列）。
        - 8ビットPCMは符号なしなので無音は 0x80、それ以外は 0。
    """
    with _open(wav_in) as w:
        params = w.getparams()
        frames = w.readframes(params.nframes)

    frame_size = params.sampwidth * params.nchannels
    if len(frames) != params.nframes * frame_size:
        raise AudioFormatError(
            f"データ長がヘッダーと一致しません: {len(frames)} bytes / {params.nframes} frames"
        )

    target = _target_frames(target_seconds, params.framerate)
    if params.nframes >= target:
        return wav_in

    silence_byte = b"\x80" if params.sampwidth == 1 else b"\x00"
    padding = silence_byte * ((target - params.nframes) * frame_size)

    out = io.BytesIO()
    with wave.open(out, "wb") as writer:
        writer.setnchannels(params.nchannels)
        writer.setsampwidth(params.sampwidth)
        writer.setframerate(params.framerate)
        writer.writeframes(frames + padding)

    _LOGGER.debug(
        "無音パディング: %d → %d フレーム (%.3f 秒)", params.nframes, target, target / params.framerate
    )
    return out.getvalue()
