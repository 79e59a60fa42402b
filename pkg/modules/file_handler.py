"""
ファイル操作モジュール
書き起こし・アノテーション・レコードファイルの検索と読み込み、エラーハンドリング
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

from config import TEXT_ENCODINGS

_LOGGER = logging.getLogger(__name__)

TRANSCRIPT_EXTS = [".txt"]
JSON_EXTS = [".json"]


def _glob_exts(base_dir: Path, exts: Iterable[str]) -> List[str]:
    """
    指定ディレクトリ直下から指定拡張子のファイルを検索する。
    Args:
        base_dir (Path): 検索対象ディレクトリ。
        exts (Iterable[str]): 検索する拡張子（例: ['.txt']）。
    Returns:
        list: ファイルパスのリスト（重複なし、ソート済み）。
    """
    files = []
    for ext in exts:
        files.extend(base_dir.glob(f"*{ext}"))
    return sorted(set(str(f) for f in files))


def find_transcript_files(base_dir) -> List[str]:
    """
    ディレクトリ内の書き起こしテキストを検索する。
    Note:
        ディレクトリが存在しない場合は空リストを返す。
    """
    base_dir = Path(base_dir)
    if not base_dir.is_dir():
        _LOGGER.warning("ディレクトリが存在しません: %s", base_dir)
        return []
    files = _glob_exts(base_dir, TRANSCRIPT_EXTS)
    _LOGGER.debug("%d個の書き起こしファイルを発見: %s", len(files), base_dir)
    return files


def recording_id_from_filename(filepath: Union[str, os.PathLike]) -> str:
    """
    ファイル名から録音IDを取り出す（拡張子を除いたベース名）。
    Note:
        Windows形式の区切り文字も扱う。
    """
    basename = str(filepath).replace("\\", "/").rsplit("/", 1)[-1]
    return os.path.splitext(basename)[0]


def read_text_file(filepath) -> Optional[str]:
    """
    テキストファイルを安全に読み込む（複数エンコーディング対応）。
    Returns:
        str or None: ファイル内容。読めなければNone。空ファイルは空文字列。
    Note:
        - utf-8, utf-8-sig, shift_jis, cp932 の順にデコードを試みる。
        - 先頭のBOMは取り除く。
    """
    try:
        raw = Path(filepath).read_bytes()
    except OSError as e:
        _LOGGER.warning("ファイル読み込みエラー: %s (%s)", filepath, e)
        return None

    for encoding in TEXT_ENCODINGS:
        try:
            return raw.decode(encoding).lstrip("﻿")
        except UnicodeDecodeError:
            continue

    _LOGGER.warning("全エンコーディングで失敗: %s", filepath)
    return None


def load_json_file(filepath) -> Union[Dict, List, None]:
    """
    JSONファイルを安全に読み込む（複数エンコーディング対応）。
    Args:
        filepath (str): 読み込み対象ファイルパス。
    Returns:
        dict, list, or None: パース済みデータ。失敗時はNone。
    Note:
        - ファイルサイズ0や空ファイルはNone。
        - JSONDecodeErrorやUnicodeDecodeErrorは握りつぶして次のエンコーディングへ。
    """
    _LOGGER.debug("読み込み中: %s", os.path.basename(str(filepath)))

    try:
        raw = Path(filepath).read_bytes()
    except OSError as e:
        _LOGGER.warning("ファイル読み込みエラー: %s (%s)", filepath, e)
        return None

    if not raw.strip():
        _LOGGER.warning("ファイルが空です: %s", filepath)
        return None

    for encoding in TEXT_ENCODINGS:
        try:
            content = raw.decode(encoding).lstrip("﻿").strip()
            return json.loads(content)
        except UnicodeDecodeError:
            continue
        except json.JSONDecodeError as e:
            _LOGGER.debug("JSON解析エラー (%s): %s", encoding, e)
            continue

    _LOGGER.warning("JSONとして読み込めません: %s", filepath)
    return None


def read_jsonl(filepath) -> List[Dict[str, Any]]:
    """
    JSON Lines ファイルを1行1オブジェクトとして読み込む。
    Raises:
        ValueError: 解析できない行がある（行番号付き）。
    Note:
        空行は読み飛ばす。
    """
    rows: List[Dict[str, Any]] = []
    with open(filepath, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{filepath}:{lineno} JSON解析エラー: {e}") from e
    return rows


def append_jsonl(filepath, rows: Iterable[Dict[str, Any]]) -> int:
    """辞書を1行ずつ追記する。書き込んだ行数を返す"""
    count = 0
    with open(filepath, "a", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
            count += 1
    return count
