"""
テキスト正規化モジュール
========================
参照書き起こし・ベンダー出力を比較用のトークン列に変換する。

整形の違い（大文字小文字、句読点、ベンダー独自タグ、話者スタンプ）を
取り除き、アライメントが認識誤りだけを数えるようにするのが目的。

* NFC正規化 → 曲がったアポストロフィを ' に統一
* 行頭の話者番号＋タイムスタンプを1回だけ除去（RevAI）
* <silence> などの山括弧タグを除去
* 小文字化、語中の ' と - 以外の記号を除去
* 数字は既定で変換しない（digit_word_map 指定時のみ）
"""
from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional

from config import DEFAULT_FILLER_TOKENS, DEFAULT_SPEAKER_STAMP_PATTERN

__all__ = [
    "RawTranscript",
    "TokenSequence",
    "NormalizationConfig",
    "normalize",
    "tokenize_plain",
]

_TAG_RE = re.compile(r"<[^<>]*>")
_APOSTROPHES = str.maketrans({"’": "'", "‘": "'", "ʼ": "'", "＇": "'"})
_JOINERS = "'-"


@dataclass(frozen=True)
class RawTranscript:
    """正規化前の書き起こし"""

    text: str
    source: str = "reference"  # "reference" | "vendor-output"
    vendor: Optional[str] = None


# 比較の単位（小文字の単語トークン列）
TokenSequence = List[str]


@dataclass(frozen=True)
class NormalizationConfig:
    strip_vendor_tags: bool = True
    strip_leading_speaker_stamp: bool = True
    digit_word_map: Optional[Dict[str, str]] = None
    filler_tokens: FrozenSet[str] = field(default_factory=lambda: frozenset(DEFAULT_FILLER_TOKENS))
    speaker_stamp_pattern: str = DEFAULT_SPEAKER_STAMP_PATTERN

    def __post_init__(self):
        if not self.filler_tokens:
            raise ValueError("filler_tokens は空にできません")
        object.__setattr__(self, "filler_tokens", frozenset(t.lower() for t in self.filler_tokens))


DEFAULT_CONFIG = NormalizationConfig()


def _clean_token(token: str) -> str:
    """英数字と語中の ' - 以外を落とし、前後の ' - を削る"""
    kept = "".join(ch for ch in token if ch.isalnum() or ch in _JOINERS)
    return kept.strip(_JOINERS)


def _split(text: str) -> List[str]:
    # 記号は区切りとして扱う（"end.Next" は2語）
    spaced = "".join(ch if (ch.isalnum() or ch in _JOINERS) else " " for ch in text)
    tokens = []
    for raw in spaced.split():
        tok = _clean_token(raw)
        if tok:
            tokens.append(tok)
    return tokens


def normalize(raw: RawTranscript | str, config: NormalizationConfig = DEFAULT_CONFIG) -> TokenSequence:
    """
    書き起こしを正規化トークン列に変換する。
    Args:
        raw (RawTranscript | str): 入力テキスト。strはRawTranscript(text)として扱う。
        config (NormalizationConfig): 正規化設定。
    Returns:
        list[str]: 小文字の単語トークン列（元の順序）。空入力なら空リスト。
    Note:
        - normalize(" ".join(normalize(x))) == normalize(x) が常に成り立つ。
        - '<' を含まない入力では strip_vendor_tags の値によらず結果は同じ。
    """
    text = raw.text if isinstance(raw, RawTranscript) else raw
    if not text:
        return []

    text = unicodedata.normalize("NFC", text).translate(_APOSTROPHES)

    if config.strip_leading_speaker_stamp:
        text = re.sub(config.speaker_stamp_pattern, " ", text, count=1, flags=re.IGNORECASE)

    if config.strip_vendor_tags:
        text = _TAG_RE.sub(" ", text)

    text = unicodedata.normalize("NFC", text.lower())
    tokens = _split(text)

    if config.digit_word_map:
        mapped: List[str] = []
        for tok in tokens:
            if tok in config.digit_word_map:
                mapped.extend(_split(unicodedata.normalize("NFC", config.digit_word_map[tok].lower())))
            else:
                mapped.append(tok)
        tokens = mapped

    # 記号除去で合成可能な並びが生まれることがあるので最後にもう一度NFC
    tokens = [_clean_token(unicodedata.normalize("NFC", tok)) for tok in tokens]
    return [tok for tok in tokens if tok]


def tokenize_plain(text: str) -> TokenSequence:
    """既定設定で正規化する（コーパスのフィルタリング用）"""
    return normalize(RawTranscript(text), DEFAULT_CONFIG)
