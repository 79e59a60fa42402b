"""
レポート組み立てモジュール
==========================
評価レコード（1録音×1バックエンド×1条件）を集計し、表の集まり（ReportDocument）にする。

作る表
------
* by_<fields> ― グルーピングごとの MER の平均・SD・件数（既定は system×condition, ×l1, ×gender, ×speech_type）
* condition_difference ― システム別の omitted/retained の平均と差、対応のあるt検定
* efficiency ― システム×条件別の処理時間と効率 (1 - MER) / 処理時間
* disfluency ― システム別のフィラー検出率・反復保持率・リビジョンMER（合計どうしの比）
* tests ― Friedman（録音×システムのMER）、Spearman（MER×処理時間）、フィラー検出と反復保持のχ²
* pairwise_comparisons ― フィラー検出・反復保持のシステム対ごとのχ²（Bonferroni 補正）

各行の records 列には、その行の計算に使ったレコードIDを並べる。
値は丸めずに保持し、丸めは出力時（report_exporter）に行う。
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import pandas as pd

from config import DEFAULT_GROUPINGS, TOOL_VERSION
from modules.align import ErrorCounts, align, render_alignment
from modules.corpus import Speaker
from modules.data_converter import convert_records_to_dataframe, get_dataframe_summary, sort_dataframe
from modules.disfluency import DisfluencyReport, RevisionSpan, analyze
from modules.errors import AsrBenchError, ReportError
from modules.file_handler import append_jsonl, read_jsonl
from modules.metrics import efficiency as efficiency_score
from modules.metrics import mer as match_error_rate
from modules.metrics import wer as word_error_rate
from modules.stats import (
    KEY_COLUMNS,
    GroupKey,
    chi_square_counts,
    friedman,
    group_mean_sd,
    paired_t,
    pairwise_chi_square,
    spearman,
)
from modules.textnorm import DEFAULT_CONFIG, NormalizationConfig, RawTranscript, normalize

_LOGGER = logging.getLogger(__name__)

__all__ = [
    "EvaluationRecord",
    "ReportDocument",
    "build_report",
    "config_digest",
    "write_records",
    "read_records",
    "score_transcript",
]

_COUNT_FIELDS = ("hits", "substitutions", "deletions", "insertions")


@dataclass
class EvaluationRecord:
    recording_id: str
    speaker_id: str
    backend_id: str
    condition: str
    l1: Optional[str] = None
    gender: Optional[str] = None
    speech_type: Optional[str] = None
    mer: Optional[float] = None
    wer: Optional[float] = None
    counts: Optional[ErrorCounts] = None
    processing_time: Optional[float] = None
    efficiency: Optional[float] = None
    disfluency: Optional[DisfluencyReport] = None
    raw_text: Optional[str] = None
    retried: bool = False
    captured_at: Optional[str] = None  # ベンダー出力を取得した時刻（ISO 8601）

    def __post_init__(self):
        if self.efficiency is None and self.mer is not None and self.processing_time:
            self.efficiency = efficiency_score(self.mer, self.processing_time).value

    @property
    def record_id(self) -> str:
        return f"{self.backend_id}/{self.condition}/{self.recording_id}"

    def to_dict(self) -> Dict[str, Any]:
        row: Dict[str, Any] = {
            "recording_id": self.recording_id,
            "speaker_id": self.speaker_id,
            "l1": self.l1,
            "gender": self.gender,
            "speech_type": self.speech_type,
            "backend_id": self.backend_id,
            "condition": self.condition,
            "mer": self.mer,
            "wer": self.wer,
            "processing_time": self.processing_time,
            "efficiency": self.efficiency,
            "raw_text": self.raw_text,
            "retried": self.retried,
            "captured_at": self.captured_at,
        }
        counts = self.counts.to_dict() if self.counts else {}
        for name in _COUNT_FIELDS:
            row[name] = counts.get(name)
        row["disfluency"] = self.disfluency.to_dict() if self.disfluency else None
        return row

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvaluationRecord":
        counts = None
        if all(data.get(name) is not None for name in _COUNT_FIELDS):
            counts = ErrorCounts(**{name: int(data[name]) for name in _COUNT_FIELDS})
        disfluency = data.get("disfluency")
        return cls(
            recording_id=str(data["recording_id"]),
            speaker_id=str(data.get("speaker_id") or data["recording_id"]),
            backend_id=str(data["backend_id"]),
            condition=str(data["condition"]),
            l1=data.get("l1"),
            gender=data.get("gender"),
            speech_type=data.get("speech_type"),
            mer=data.get("mer"),
            wer=data.get("wer"),
            counts=counts,
            processing_time=data.get("processing_time"),
            efficiency=data.get("efficiency"),
            disfluency=DisfluencyReport.from_dict(disfluency) if isinstance(disfluency, dict) else None,
            raw_text=data.get("raw_text"),
            retried=bool(data.get("retried", False)),
            captured_at=data.get("captured_at"),
        )


@dataclass
class ReportDocument:
    generated_at: str
    tool_version: str
    config_digest: str
    tables: Dict[str, List[Dict[str, Any]]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "generated_at": self.generated_at,
            "tool_version": self.tool_version,
            "config_digest": self.config_digest,
            "tables": self.tables,
        }


# ---------------------------------------------------------------------------
# 記録ファイル（JSON Lines）
# ---------------------------------------------------------------------------

def write_records(records: Iterable[EvaluationRecord], path) -> int:
    """レコードを1行1JSONで追記する"""
    return append_jsonl(path, (r.to_dict() for r in records))


def read_records(path) -> List[EvaluationRecord]:
    return [EvaluationRecord.from_dict(row) for row in read_jsonl(path)]


# ---------------------------------------------------------------------------
# 表の組み立て
# ---------------------------------------------------------------------------

def config_digest(settings: Optional[Dict[str, Any]]) -> str:
    """有効な設定の正準JSONのSHA-256"""
    canonical = json.dumps(settings or {}, sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _generated_at(explicit: Optional[str], records: Sequence[EvaluationRecord]) -> str:
    """
    生成時刻を決める。明示指定、SOURCE_DATE_EPOCH、レコードの最新 captured_at、UNIXエポックの順。
    Note:
        現在時刻は使わない。同じ入力からは同じ値になる。
    """
    if explicit:
        return explicit
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        return datetime.fromtimestamp(int(epoch), timezone.utc).isoformat(timespec="seconds")
    captured = []
    for record in records:
        if record.captured_at:
            moment = datetime.fromisoformat(record.captured_at)
            # タイムゾーンの無い時刻は UTC とみなす
            captured.append(moment if moment.tzinfo else moment.replace(tzinfo=timezone.utc))
    if captured:
        return max(captured).astimezone(timezone.utc).isoformat(timespec="seconds")
    return datetime.fromtimestamp(0, timezone.utc).isoformat(timespec="seconds")


def _mean_sd(values: pd.Series) -> Tuple[Optional[float], Optional[float], int]:
    values = values.dropna().astype(float)
    n = len(values)
    if n == 0:
        return None, None, 0
    sd = float(values.std(ddof=1)) if n >= 2 else None
    return float(values.mean()), sd, n


def _ids(frame: pd.DataFrame) -> List[str]:
    return sorted(frame["record_id"].tolist())


def _grouping_table(df: pd.DataFrame, grouping: Sequence[str]) -> List[Dict[str, Any]]:
    unknown = [name for name in grouping if name not in KEY_COLUMNS]
    if unknown:
        raise ReportError(f"未知のグルーピング項目です: {unknown}")
    columns = [KEY_COLUMNS[name] for name in grouping]
    missing = [c for c in columns if c not in df.columns]
    if missing:
        return []

    # 値の無いセルは作らない（0で埋めない）
    scored = df.dropna(subset=columns + ["mer"])
    rows = []
    for values, group in scored.groupby(columns, sort=True):
        values = values if isinstance(values, tuple) else (values,)
        row = dict(zip(grouping, values))
        mean, sd, n = group_mean_sd(scored, GroupKey(**row), require_sd=False)
        row.update({"mean": mean, "sd": sd, "n": n, "records": _ids(group)})
        rows.append(row)
    return rows


def _condition_difference_table(df: pd.DataFrame) -> List[Dict[str, Any]]:
    scored = df.dropna(subset=["mer"])
    rows = []
    for system, group in scored.groupby("backend_id", sort=True):
        omitted = group[group["condition"] == "omitted"]
        retained = group[group["condition"] == "retained"]
        if omitted.empty or retained.empty:
            continue
        o_mean, o_sd, o_n = _mean_sd(omitted["mer"])
        r_mean, r_sd, r_n = _mean_sd(retained["mer"])
        row = {
            "system": system,
            "omitted_mean": o_mean,
            "omitted_sd": o_sd,
            "omitted_n": o_n,
            "retained_mean": r_mean,
            "retained_sd": r_sd,
            "retained_n": r_n,
            "difference": o_mean - r_mean,
            "t": None,
            "df": None,
            "p_value": None,
            "effect_size": None,
            "records": _ids(pd.concat([omitted, retained])),
        }
        paired = omitted.set_index("recording_id")["mer"].to_frame("omitted").join(
            retained.set_index("recording_id")["mer"].to_frame("retained"), how="inner"
        ).sort_index()
        if len(paired) >= 2:
            try:
                result = paired_t(paired["omitted"].to_numpy(), paired["retained"].to_numpy())
                row.update({
                    "t": result.statistic,
                    "df": result.df,
                    "p_value": result.p_value,
                    "effect_size": result.effect_size,
                })
            except AsrBenchError as e:
                _LOGGER.info("%s の対応のあるt検定を省略: %s", system, e)
        rows.append(row)
    return rows


def _efficiency_table(df: pd.DataFrame) -> List[Dict[str, Any]]:
    if "processing_time" not in df.columns:
        return []
    timed = df.dropna(subset=["processing_time"])
    rows = []
    for (system, condition), group in timed.groupby(["backend_id", "condition"], sort=True):
        t_mean, t_sd, n = _mean_sd(group["processing_time"])
        e_mean, e_sd, _ = _mean_sd(group["efficiency"]) if "efficiency" in group.columns else (None, None, 0)
        rows.append({
            "system": system,
            "condition": condition,
            "processing_time_mean": t_mean,
            "processing_time_sd": t_sd,
            "efficiency_mean": e_mean,
            "efficiency_sd": e_sd,
            "n": n,
            "records": _ids(group),
        })
    return rows


def _disfluency_source(df: pd.DataFrame) -> pd.DataFrame:
    """非流暢性の評価対象（retained 条件があればそれだけ）"""
    if "reference_fillers" not in df.columns:
        return df.iloc[0:0]
    annotated = df.dropna(subset=["reference_fillers"])
    retained = annotated[annotated["condition"] == "retained"]
    return retained if not retained.empty else annotated


def _disfluency_table(df: pd.DataFrame) -> List[Dict[str, Any]]:
    source = _disfluency_source(df)
    rows = []
    for system, group in source.groupby("backend_id", sort=True):
        ref_fillers = int(group["reference_fillers"].sum())
        hyp_fillers = int(group["hypothesis_fillers"].sum())
        ref_reps = int(group["reference_repetitions"].sum())
        kept_reps = int(group["retained_repetitions"].sum())
        revision_mers = [
            float(r["mer"])
            for revisions in group.get("revisions", pd.Series(dtype=object))
            if isinstance(revisions, list)
            for r in revisions
        ]
        rev_mean, rev_sd, rev_n = _mean_sd(pd.Series(revision_mers, dtype=float))
        rows.append({
            "system": system,
            "reference_fillers": ref_fillers,
            "filler_count": hyp_fillers,
            "filler_detection_rate": hyp_fillers / ref_fillers if ref_fillers else None,
            "reference_repetitions": ref_reps,
            "repetition_count": kept_reps,
            "repetition_retention_rate": kept_reps / ref_reps if ref_reps else None,
            "revision_n": rev_n,
            "revision_mer_mean": rev_mean,
            "revision_mer_sd": rev_sd,
            "revision_accuracy": 1.0 - rev_mean if rev_mean is not None else None,
            "records": _ids(group),
        })
    return rows


# 検定名 → (検出・保持数の列, 参照側の総数の列)
_RETENTION_TESTS = {
    "chi_square_filler_detection": ("filler_count", "reference_fillers"),
    "chi_square_repetition_retention": ("repetition_count", "reference_repetitions"),
}


def _retention_rows(disfluency_rows: List[Dict[str, Any]], count_key: str, total_key: str) -> List[Dict[str, Any]]:
    """参照側に1件以上あるシステム。検出数が参照数を超えるシステムがあれば表を作らない"""
    counted = [r for r in disfluency_rows if r[total_key]]
    if any(r[count_key] > r[total_key] for r in counted):
        _LOGGER.info("%s が %s を超えるシステムがあるため検定しません", count_key, total_key)
        return []
    return counted


def _retention_table(counted: List[Dict[str, Any]], count_key: str, total_key: str) -> List[List[int]]:
    return [[r[count_key], r[total_key] - r[count_key]] for r in counted]


def _test_row(name: str, result, records: List[str], **extra) -> Dict[str, Any]:
    row = {"test": name, **result.to_dict(), "records": records}
    row.update(extra)
    return row


def _tests_table(df: pd.DataFrame, disfluency_rows: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    rows = []
    scored = df.dropna(subset=["mer"])

    # Friedman: 録音×システム（retained 条件があればそれ）
    conditions = set(scored["condition"])
    subset = scored[scored["condition"] == "retained"] if "retained" in conditions else scored
    if subset["condition"].nunique() == 1:
        matrix = subset.pivot_table(index="recording_id", columns="backend_id", values="mer", aggfunc="first").dropna()
        if matrix.shape[0] >= 2 and matrix.shape[1] >= 2:
            try:
                result = friedman(matrix.to_numpy())
                used = subset[subset["recording_id"].isin(matrix.index) & subset["backend_id"].isin(matrix.columns)]
                rows.append(_test_row("friedman_mer", result, _ids(used), systems=sorted(matrix.columns)))
            except AsrBenchError as e:
                _LOGGER.info("Friedman検定を省略: %s", e)

    # Spearman: MER と処理時間
    if "processing_time" in scored.columns:
        timed = scored.dropna(subset=["processing_time"])
        if len(timed) >= 3:
            try:
                result = spearman(timed["mer"].to_numpy(), timed["processing_time"].to_numpy())
                rows.append(_test_row("spearman_mer_processing_time", result, _ids(timed)))
            except AsrBenchError as e:
                _LOGGER.info("Spearman相関を省略: %s", e)

    # χ²: システム別のフィラー検出・反復保持の有無
    for name, (count_key, total_key) in _RETENTION_TESTS.items():
        counted = _retention_rows(disfluency_rows, count_key, total_key)
        if len(counted) < 2:
            continue
        try:
            result = chi_square_counts(_retention_table(counted, count_key, total_key))
            ids = sorted(i for r in counted for i in r["records"])
            rows.append(_test_row(name, result, ids, systems=[r["system"] for r in counted]))
        except AsrBenchError as e:
            _LOGGER.info("%s を省略: %s", name, e)
    return rows


def _pairwise_table(disfluency_rows: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """システム対ごとのχ²（Bonferroni 補正）"""
    rows = []
    for name, (count_key, total_key) in _RETENTION_TESTS.items():
        counted = _retention_rows(disfluency_rows, count_key, total_key)
        if len(counted) < 2:
            continue
        records = {r["system"]: r["records"] for r in counted}
        table = _retention_table(counted, count_key, total_key)
        for row in pairwise_chi_square(table, [r["system"] for r in counted]):
            first, second = row["pair"]
            rows.append({"test": name, **row, "records": sorted(records[first] + records[second])})
    return rows


def build_report(
    records: Sequence[EvaluationRecord],
    groupings: Sequence[Sequence[str]] = DEFAULT_GROUPINGS,
    settings: Optional[Dict[str, Any]] = None,
    generated_at: Optional[str] = None,
) -> ReportDocument:
    """
    評価レコードからレポートを組み立てる。
    Args:
        records: EvaluationRecord のリスト。
        groupings: GroupKey のフィールド名の組（例: ("system", "condition")）のリスト。
        settings: config_digest の元になる有効設定。
        generated_at: 生成時刻（省略時は SOURCE_DATE_EPOCH、最新の captured_at、UNIXエポックの順）。
    Raises:
        ReportError: レコードが空、未知のグルーピング項目。
    """
    if not records:
        raise ReportError("レコードが空です")

    df = convert_records_to_dataframe(records)
    df["record_id"] = [r.record_id for r in records]
    df = sort_dataframe(df)

    tables: Dict[str, List[Dict[str, Any]]] = {}
    for grouping in groupings:
        tables["by_" + "_".join(grouping)] = _grouping_table(df, list(grouping))
    tables["condition_difference"] = _condition_difference_table(df)
    tables["efficiency"] = _efficiency_table(df)
    tables["disfluency"] = _disfluency_table(df)
    tables["tests"] = _tests_table(df, tables["disfluency"])
    tables["pairwise_comparisons"] = _pairwise_table(tables["disfluency"])

    summary = get_dataframe_summary(df)
    _LOGGER.info(
        "レポート作成: %d レコード（採点済み %d）、話者 %d 人、%d 表",
        summary["total_records"], summary.get("scored_records", 0), summary["speakers"], len(tables),
    )
    _LOGGER.debug("バックエンド別件数: %s", summary["backends"])
    return ReportDocument(
        generated_at=_generated_at(generated_at, records),
        tool_version=TOOL_VERSION,
        config_digest=config_digest(settings),
        tables=tables,
    )


# ---------------------------------------------------------------------------
# 採点
# ---------------------------------------------------------------------------

def score_transcript(
    reference_text: str,
    hypothesis_text: Optional[str],
    *,
    recording_id: str,
    backend_id: str,
    condition: str,
    speaker: Optional[Speaker] = None,
    speech_type: Optional[str] = None,
    processing_time: Optional[float] = None,
    spans: Sequence[RevisionSpan] = (),
    config: NormalizationConfig = DEFAULT_CONFIG,
    retried: bool = False,
    captured_at: Optional[str] = None,
) -> EvaluationRecord:
    """
    参照と仮説の書き起こしを正規化・アライメントし、評価レコードを作る。
    Args:
        reference_text (str): 人手の書き起こし。
        hypothesis_text (str | None): ベンダー出力（None や空文字は全削除として採点）。
        spans (Sequence[RevisionSpan]): リビジョンのアノテーション。
    Raises:
        UndefinedMetricError: 参照が空。
    """
    reference = normalize(RawTranscript(reference_text), config)
    hypothesis = normalize(RawTranscript(hypothesis_text or "", source="vendor-output", vendor=backend_id), config)
    alignment = align(reference, hypothesis)
    counts = alignment.counts
    wer_value = word_error_rate(counts)
    mer_value = match_error_rate(counts)
    disfluency = analyze(reference, hypothesis, spans, config, alignment=alignment)

    if _LOGGER.isEnabledFor(logging.DEBUG):
        _LOGGER.debug("%s\n%s", backend_id, render_alignment(alignment, reference, hypothesis),
                      extra={"recording_id": recording_id})

    return EvaluationRecord(
        recording_id=recording_id,
        speaker_id=speaker.id if speaker else recording_id,
        backend_id=backend_id,
        condition=condition,
        l1=speaker.l1 if speaker else None,
        gender=speaker.gender if speaker else None,
        speech_type=speech_type,
        mer=mer_value,
        wer=wer_value,
        counts=counts,
        processing_time=processing_time if processing_time and processing_time > 0 else None,
        disfluency=disfluency,
        raw_text=hypothesis_text,
        retried=retried,
        captured_at=captured_at,
    )
