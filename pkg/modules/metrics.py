"""
指標計算モジュール
H/S/D/I 集計から WER・MER・正解率・効率を求める
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from modules.align import ErrorCounts, align
from modules.errors import InvalidMeasurementError, UndefinedMetricError

__all__ = [
    "ScoreReport",
    "EfficiencyScore",
    "wer",
    "mer",
    "efficiency",
    "score",
]


@dataclass(frozen=True)
class ScoreReport:
    wer: float
    mer: float
    accuracy: float
    counts: ErrorCounts


@dataclass(frozen=True)
class EfficiencyScore:
    """1秒あたりの正解率"""

    value: float
    accuracy: float
    processing_time: float


def wer(counts: ErrorCounts) -> float:
    """
    単語誤り率 (S + D + I) / (S + D + H)。
    Raises:
        UndefinedMetricError: 参照が空。
    Note:
        挿入が多いと1を超える。
    """
    denominator = counts.substitutions + counts.deletions + counts.hits
    if denominator == 0:
        raise UndefinedMetricError("参照が空のためWERを定義できません")
    return counts.errors / denominator


def mer(counts: ErrorCounts) -> float:
    """
    一致誤り率 (S + D + I) / (S + D + H + I)。常に [0, 1]。
    Raises:
        UndefinedMetricError: 参照・仮説とも空。
    """
    denominator = counts.errors + counts.hits
    if denominator == 0:
        raise UndefinedMetricError("参照・仮説とも空のためMERを定義できません")
    return counts.errors / denominator


def efficiency(mer_value: float, processing_time: float) -> EfficiencyScore:
    """
    効率 = (1 - MER) / 処理時間。
    Args:
        mer_value (float): MER（0〜1）。
        processing_time (float): 処理時間（秒）。
    Raises:
        InvalidMeasurementError: 処理時間が0以下、またはMERが範囲外。
    """
    if processing_time is None or not processing_time > 0:
        raise InvalidMeasurementError(f"処理時間は正の値である必要があります: {processing_time}")
    if not 0.0 <= mer_value <= 1.0:
        raise InvalidMeasurementError(f"MERが範囲外です: {mer_value}")
    accuracy = 1.0 - mer_value
    return EfficiencyScore(value=accuracy / processing_time, accuracy=accuracy, processing_time=processing_time)


def score(reference: Sequence[str], hypothesis: Sequence[str]) -> ScoreReport:
    """
    アライメントしてWER/MER/正解率をまとめて返す。
    Raises:
        UndefinedMetricError: 参照が空（WER未定義）。
    """
    counts = align(reference, hypothesis).counts
    mer_value = mer(counts)
    return ScoreReport(wer=wer(counts), mer=mer_value, accuracy=1.0 - mer_value, counts=counts)
