"""
コーパス準備モジュール
======================
マニフェストの読み込みと検証、頻出語リストによる文のフィルタリング、
シード付きランダムサンプリングを行う。

マニフェスト（JSON）::

    {"speakers":   [{"id", "l1", "gender"}],
     "recordings": [{"speaker_id", "audio_path", "duration_s", "reference_path", "speech_type"}]}

recordings には任意で "recording_id" を書ける。省略時は音声ファイル名から作る。
相対パスはマニフェストのあるディレクトリ基準で解決する。
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from config import COMMENT_PREFIX, GENDERS, SPEECH_TYPES
from modules.errors import ManifestError, PreconditionError, SamplingError
from modules.file_handler import load_json_file, read_text_file, recording_id_from_filename
from modules.textnorm import tokenize_plain

_LOGGER = logging.getLogger(__name__)

T = TypeVar("T")

# CMU ARCTIC の txt.done.data 形式: ( arctic_a0001 "Author of the danger trail." )
_ARCTIC_LINE = re.compile(r'^\(\s*(\S+)\s+"(.*)"\s*\)\s*$')

__all__ = [
    "Speaker",
    "Recording",
    "Wordlist",
    "load_manifest",
    "load_wordlist",
    "load_prompts",
    "filter_sentences",
    "sample",
]


@dataclass(frozen=True)
class Speaker:
    id: str
    l1: str
    gender: str


@dataclass(frozen=True)
class Recording:
    recording_id: str
    speaker_id: str
    audio_path: str
    duration: float
    reference_path: Optional[str]
    speech_type: str


@dataclass(frozen=True)
class Wordlist:
    entries: FrozenSet[str]

    def __post_init__(self):
        if not self.entries:
            raise PreconditionError("ワードリストが空です")

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def _resolve(base: Path, value: Optional[str]) -> Optional[str]:
    if not value:
        return None
    path = Path(value)
    return str(path if path.is_absolute() else base / path)


def _require(item: dict, key: str, where: str):
    if key not in item or item[key] in (None, ""):
        raise ManifestError(f"{where}: '{key}' がありません")
    return item[key]


def load_manifest(path) -> Tuple[Dict[str, Speaker], List[Recording]]:
    """
    マニフェストを読み込み、参照整合性まで検証する。
    Returns:
        tuple[dict[str, Speaker], list[Recording]]: 話者ID→話者、録音（記載順）。
    Raises:
        ManifestError: 解析エラー、話者IDの重複、未定義の話者参照、0以下の長さ、不正な列挙値。
    """
    data = load_json_file(path)
    if not isinstance(data, dict):
        raise ManifestError(f"マニフェストを解析できません: {path}")
    base = Path(path).parent

    speakers: Dict[str, Speaker] = {}
    for n, item in enumerate(data.get("speakers") or [], 1):
        where = f"speakers[{n}]"
        speaker = Speaker(
            id=str(_require(item, "id", where)),
            l1=str(_require(item, "l1", where)),
            gender=str(_require(item, "gender", where)).upper(),
        )
        if speaker.id in speakers:
            raise ManifestError(f"話者IDが重複しています: {speaker.id}")
        if speaker.gender not in GENDERS:
            raise ManifestError(f"{where}: 性別は {GENDERS} のいずれかです: {speaker.gender}")
        speakers[speaker.id] = speaker

    recordings: List[Recording] = []
    seen_ids = set()
    for n, item in enumerate(data.get("recordings") or [], 1):
        where = f"recordings[{n}]"
        speaker_id = str(_require(item, "speaker_id", where))
        if speaker_id not in speakers:
            raise ManifestError(f"{where}: 未定義の話者です: {speaker_id}")
        audio_path = _resolve(base, str(_require(item, "audio_path", where)))
        try:
            duration = float(_require(item, "duration_s", where))
        except (TypeError, ValueError) as e:
            raise ManifestError(f"{where}: duration_s が数値ではありません") from e
        if not duration > 0:
            raise ManifestError(f"{where}: duration_s は正の値である必要があります: {duration}")
        speech_type = str(_require(item, "speech_type", where))
        if speech_type not in SPEECH_TYPES:
            raise ManifestError(f"{where}: speech_type は {SPEECH_TYPES} のいずれかです: {speech_type}")

        recording_id = str(item.get("recording_id") or recording_id_from_filename(audio_path))
        if recording_id in seen_ids:
            raise ManifestError(f"録音IDが重複しています: {recording_id}")
        seen_ids.add(recording_id)

        recordings.append(Recording(
            recording_id=recording_id,
            speaker_id=speaker_id,
            audio_path=audio_path,
            duration=duration,
            reference_path=_resolve(base, item.get("reference_path")),
            speech_type=speech_type,
        ))

    _LOGGER.info("マニフェスト読み込み完了: 話者 %d 人、録音 %d 件", len(speakers), len(recordings))
    return speakers, recordings


def _content_lines(path) -> List[str]:
    text = read_text_file(path)
    if text is None:
        raise PreconditionError(f"ファイルを読み込めません: {path}")
    lines = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith(COMMENT_PREFIX):
            lines.append(line)
    return lines


def load_wordlist(path) -> Wordlist:
    """
    1行1語のワードリストを読み込む（'#' 以降の行はコメント）。
    Note:
        各行は書き起こしと同じ規則で正規化する。
    """
    entries = set()
    for line in _content_lines(path):
        entries.update(tokenize_plain(line))
    return Wordlist(frozenset(entries))


def load_prompts(path) -> List[str]:
    """
    プロンプト文を1行1文で読み込む。
    Note:
        ARCTIC形式 `( arctic_a0001 "..." )` の行は引用符の中身だけを取り出す。
    """
    prompts = []
    for line in _content_lines(path):
        match = _ARCTIC_LINE.match(line)
        prompts.append(match.group(2) if match else line)
    return prompts


def filter_sentences(prompts: Sequence[str], wordlist: Wordlist) -> List[str]:
    """すべての正規化トークンがワードリストに含まれる文だけを残す（順序は維持）"""
    kept = [p for p in prompts if all(tok in wordlist for tok in tokenize_plain(p))]
    _LOGGER.info("フィルタリング: %d 文中 %d 文を採用", len(prompts), len(kept))
    return kept


def sample(items: Sequence[T], k: int, seed: int) -> List[T]:
    """
    シードから決定的に k 個を非復元抽出する。
    Note:
        乱数は numpy の PCG64（64ビット）、先頭 k 個だけの部分 Fisher–Yates シャッフル。
        同じ items・k・seed なら常に同じ並びを返す。
    Raises:
        SamplingError: k が負、または母集団より大きい。
    """
    n = len(items)
    if k < 0 or k > n:
        raise SamplingError(f"{n} 件から {k} 件は抽出できません")
    rng = np.random.Generator(np.random.PCG64(seed % (1 << 64)))
    pool = list(items)
    for i in range(k):
        j = int(rng.integers(i, n))
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:k]
