"""
データ変換モジュール
評価レコードのDataFrame変換、数値の正規化、並べ替えと要約
"""

import logging
from dataclasses import asdict, is_dataclass
from typing import Any, Dict, Iterable, Optional

import numpy as np
import pandas as pd

from config import RECORD_COLUMNS

_LOGGER = logging.getLogger(__name__)

NUMERIC_COLUMNS = [
    "mer",
    "wer",
    "hits",
    "substitutions",
    "deletions",
    "insertions",
    "processing_time",
    "efficiency",
    "reference_fillers",
    "hypothesis_fillers",
    "reference_repetitions",
    "retained_repetitions",
]

SORT_KEYS = ["backend_id", "condition", "speaker_id", "recording_id"]


def normalize_numeric_value(value) -> Optional[float]:
    """数値データの正規化（空文字・None・変換不能は None）"""
    if value is None or value == "":
        return None
    try:
        number = float(value)
    except (ValueError, TypeError):
        return None
    return None if np.isnan(number) else number


def record_to_row(record: Any) -> Dict[str, Any]:
    """
    評価レコード（dataclass / to_dict を持つオブジェクト / dict）を1行分の辞書にする。
    Note:
        disfluency の生カウントは列に展開し、リビジョン一覧は revisions 列に入れる。
    """
    if isinstance(record, dict):
        row = dict(record)
    elif hasattr(record, "to_dict"):
        row = record.to_dict()
    elif is_dataclass(record):
        row = asdict(record)
    else:
        raise TypeError(f"レコードに変換できません: {type(record).__name__}")

    disfluency = row.pop("disfluency", None)
    if isinstance(disfluency, dict):
        for key in ("reference_fillers", "hypothesis_fillers", "reference_repetitions", "retained_repetitions"):
            row.setdefault(key, disfluency.get(key))
        row.setdefault("revisions", disfluency.get("revisions", []))
    return row


def convert_records_to_dataframe(records: Iterable[Any]) -> pd.DataFrame:
    """レコードリストをDataFrameに変換して正規化"""
    rows = [record_to_row(r) for r in records]
    if not rows:
        return pd.DataFrame(columns=RECORD_COLUMNS)

    df = pd.DataFrame(rows)
    _LOGGER.debug("%d レコードを変換中", len(df))

    for col in NUMERIC_COLUMNS:
        if col in df.columns:
            df[col] = pd.to_numeric(df[col].map(normalize_numeric_value), errors="coerce")

    # カラム順序を統一（既知の列を先頭に）
    ordered = [c for c in RECORD_COLUMNS if c in df.columns]
    ordered += [c for c in df.columns if c not in ordered]
    return df[ordered]


def sort_dataframe(df: pd.DataFrame) -> pd.DataFrame:
    """バックエンド・条件・話者・録音IDの順に安定ソート（存在しない列は無視）"""
    if df.empty:
        return df
    keys = [k for k in SORT_KEYS if k in df.columns]
    if not keys:
        return df.reset_index(drop=True)
    return df.sort_values(keys, kind="mergesort").reset_index(drop=True)


def get_dataframe_summary(df: pd.DataFrame) -> Dict[str, Any]:
    """DataFrameの要約情報を取得（列が欠けるケースに対応）"""
    if df.empty:
        return {"total_records": 0}

    summary: Dict[str, Any] = {
        "total_records": len(df),
        "backends": df["backend_id"].value_counts().sort_index().to_dict() if "backend_id" in df.columns else {},
        "conditions": df["condition"].value_counts().sort_index().to_dict() if "condition" in df.columns else {},
        "speakers": int(df["speaker_id"].nunique()) if "speaker_id" in df.columns else 0,
    }
    if "mer" in df.columns:
        scored = df["mer"].dropna()
        summary["scored_records"] = len(scored)
        summary["mer_range"] = {
            "min": float(scored.min()) if not scored.empty else None,
            "max": float(scored.max()) if not scored.empty else None,
        }
    return summary
