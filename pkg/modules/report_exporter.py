"""
レポート出力モジュール
ReportDocument の JSON / CSV 書き出しと、処理結果サマリーの表示
"""

import io
import json
import logging
import math
import sys
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Any, Dict, List, Optional, TextIO

import numpy as np
import pandas as pd

from config import REPORT_DECIMALS
from modules.errors import ReportError

_LOGGER = logging.getLogger(__name__)

FORMATS = ("json", "csv")

# 丸めずそのまま出す数値列（件数・自由度など）
_INTEGER_KEYS = {"n", "df", "omitted_n", "retained_n", "revision_n", "reference_fillers",
                 "filler_count", "reference_repetitions", "repetition_count"}


def display_round(value: float, decimals: int = REPORT_DECIMALS) -> Decimal:
    """
    表示用の丸め（偶数丸め）。
    Note:
        float の最短表記を基準に丸める（0.0625 → 0.062、0.7134 → 0.713）。
    """
    quantum = Decimal(1).scaleb(-decimals)
    return Decimal(repr(float(value))).quantize(quantum, rounding=ROUND_HALF_EVEN)


def _plain(value: Any) -> Any:
    """numpy のスカラーや NaN を JSON で扱える値にする"""
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _is_metric(key: str, value: Any) -> bool:
    return isinstance(value, float) and key not in _INTEGER_KEYS


def _json_row(row: Dict[str, Any]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for key, value in row.items():
        value = _plain(value)
        if _is_metric(key, value):
            out[key] = float(display_round(value))
            out[f"{key}_raw"] = value
        else:
            out[key] = value
    return out


def _csv_cell(key: str, value: Any) -> Any:
    value = _plain(value)
    if value is None:
        return ""
    if isinstance(value, list):
        return ";".join(str(v) for v in value)
    if _is_metric(key, value):
        return str(display_round(value))
    return value


def _export_json(doc) -> bytes:
    payload = {
        "generated_at": doc.generated_at,
        "tool_version": doc.tool_version,
        "config_digest": doc.config_digest,
        "tables": {name: [_json_row(r) for r in rows] for name, rows in doc.tables.items()},
    }
    text = json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False)
    return (text + "\n").encode("utf-8")


def _columns(rows: List[Dict[str, Any]]) -> List[str]:
    columns: List[str] = []
    for row in rows:
        columns.extend(k for k in row if k not in columns)
    return columns


def _export_csv(doc) -> bytes:
    buffer = io.StringIO(newline="")
    for key in ("generated_at", "tool_version", "config_digest"):
        buffer.write(f"# {key}: {getattr(doc, key)}\r\n")

    for name in sorted(doc.tables):
        rows = doc.tables[name]
        buffer.write(f"# table: {name}\r\n")
        if not rows:
            continue
        columns = _columns(rows)
        frame = pd.DataFrame(
            [[_csv_cell(c, row.get(c)) for c in columns] for row in rows],
            columns=columns,
        )
        # pandas の既定は QUOTE_MINIMAL（区切り文字・引用符・改行を含むセルだけ引用）
        frame.to_csv(buffer, index=False, lineterminator="\r\n")
    return buffer.getvalue().encode("utf-8")


def export(doc, fmt: str = "json") -> bytes:
    """
    ReportDocument をバイト列に書き出す。
    Args:
        doc (ReportDocument): 出力するレポート。
        fmt (str): "json" または "csv"。
    Returns:
        bytes: UTF-8。同じ文書からは常に同じバイト列になる。
    Note:
        JSON は小数3桁に丸めた値と、丸める前の値（<列名>_raw）を並べて持つ。
        CSV は表ごとに "# table: <名前>" 行で区切る。
    """
    if fmt == "json":
        return _export_json(doc)
    if fmt == "csv":
        return _export_csv(doc)
    raise ReportError(f"未対応の出力形式です: {fmt}")


def write_report(doc, output_file: str, fmt: str = "json") -> str:
    """レポートをファイルに書き出す"""
    data = export(doc, fmt)
    with open(output_file, "wb") as f:
        f.write(data)
    _LOGGER.info("レポート出力: %s (%d bytes)", output_file, len(data))
    return output_file


def print_summary(doc, output_file: Optional[str] = None, failures: int = 0, stream: TextIO = None):
    """処理結果のサマリーを表示（標準エラー出力）"""
    out = stream or sys.stderr
    print("\n📋 処理結果サマリー:", file=out)

    grouped = doc.tables.get("by_system_condition", [])
    if not grouped:
        print("   ❌ 集計できるレコードがありませんでした", file=out)
    else:
        print("   📊 システム×条件別 MER:", file=out)
        for row in grouped:
            sd = row.get("sd")
            sd_text = f"{display_round(sd)}" if sd is not None else "-"
            print(
                f"      - {row['system']} / {row['condition']}: "
                f"{display_round(row['mean'])} (SD {sd_text}, n={row['n']})",
                file=out,
            )

    for row in doc.tables.get("condition_difference", []):
        print(f"   🔁 {row['system']}: omitted - retained = {display_round(row['difference'])}", file=out)

    for row in doc.tables.get("disfluency", []):
        parts = [f"フィラー {row['filler_count']}/{row['reference_fillers']}"]
        parts.append(f"反復 {row['repetition_count']}/{row['reference_repetitions']}")
        if row.get("revision_mer_mean") is not None:
            parts.append(f"リビジョンMER {display_round(row['revision_mer_mean'])}")
        print(f"   🗣️ {row['system']}: " + "、".join(parts), file=out)

    if failures:
        print(f"   ⚠️ 失敗したレコード: {failures:,}", file=out)
    if output_file:
        print(f"   💾 出力ファイル: {output_file}", file=out)
