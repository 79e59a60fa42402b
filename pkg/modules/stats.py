"""
統計モジュール
==============
評価レコードから再現できる統計手続きをまとめる。

* group_mean_sd ― グループ別の平均・標本標準偏差（n-1）
* friedman ― Friedman検定（平均順位、同順位補正）と Kendall's W = χ² / (n(k-1))
* paired_t ― 対応のあるt検定（効果量 Cohen's d_z）
* spearman ― 平均順位のピアソン相関、p値は t 近似
* chi_square_counts ― 度数表の均一性のχ²検定（効果量 Cramér's V）
* pairwise_chi_square ― 行どうしの全ペアのχ²検定と Bonferroni 補正

分布の上側確率は scipy.stats（chi2.sf, t.sf）、順位付けは scipy.stats.rankdata を使う。
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, fields
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats as sps

from modules.data_converter import convert_records_to_dataframe
from modules.errors import (
    DegenerateTestError,
    EmptyGroupError,
    PreconditionError,
    UndefinedCorrelationError,
    UndefinedMetricError,
)

__all__ = [
    "GroupKey",
    "TestResult",
    "group_mean_sd",
    "friedman",
    "paired_t",
    "spearman",
    "chi_square_counts",
    "pairwise_chi_square",
]

# 差の標準偏差がこれ以下（平均の大きさに対する相対値）なら分散0とみなす
_ZERO_VARIANCE_TOL = 1e-12

# GroupKey のフィールド名 → レコードの列名
KEY_COLUMNS = {
    "system": "backend_id",
    "l1": "l1",
    "gender": "gender",
    "condition": "condition",
    "speech_type": "speech_type",
}


@dataclass(frozen=True)
class GroupKey:
    system: Optional[str] = None
    l1: Optional[str] = None
    gender: Optional[str] = None
    condition: Optional[str] = None
    speech_type: Optional[str] = None

    def __post_init__(self):
        if all(getattr(self, f.name) is None for f in fields(self)):
            raise PreconditionError("GroupKey には少なくとも1つのフィールドが必要です")

    def filters(self) -> dict:
        """設定されているフィールドを {列名: 値} で返す"""
        return {
            KEY_COLUMNS[f.name]: getattr(self, f.name)
            for f in fields(self)
            if getattr(self, f.name) is not None
        }


@dataclass(frozen=True)
class TestResult:
    __test__ = False  # pytest に収集させない

    statistic: float
    df: Union[float, Tuple[float, float]]
    p_value: float
    effect_size: Optional[float] = None
    n: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "df": list(self.df) if isinstance(self.df, tuple) else self.df,
            "p_value": self.p_value,
            "effect_size": self.effect_size,
            "n": self.n,
        }


def _clip_p(p: float) -> float:
    return float(min(1.0, max(0.0, p)))


def _as_frame(records: Union[pd.DataFrame, Iterable[Any]]) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        return records
    return convert_records_to_dataframe(records)


def group_mean_sd(
    records: Union[pd.DataFrame, Iterable[Any]],
    key: GroupKey,
    metric: str = "mer",
    require_sd: bool = True,
) -> Tuple[float, Optional[float], int]:
    """
    GroupKey に一致するレコードの指標の平均と標本標準偏差。
    Returns:
        tuple: (mean, sd, n)。require_sd=False かつ n=1 のとき sd は None。
    Raises:
        EmptyGroupError: 一致するレコードが無い（指標が欠損のものは数えない）。
        UndefinedMetricError: n=1 で require_sd=True。
    """
    df = _as_frame(records)
    mask = pd.Series(True, index=df.index)
    for column, value in key.filters().items():
        if column not in df.columns:
            raise EmptyGroupError(f"列がありません: {column}")
        mask &= df[column] == value
    values = df.loc[mask, metric].dropna().astype(float) if metric in df.columns else pd.Series(dtype=float)

    n = len(values)
    if n == 0:
        raise EmptyGroupError(f"該当するレコードがありません: {key}")
    mean = float(values.mean())
    if n < 2:
        if require_sd:
            raise UndefinedMetricError("標準偏差には2件以上必要です")
        return mean, None, n
    return mean, float(values.std(ddof=1)), n


def friedman(matrix: Union[Sequence[Sequence[float]], np.ndarray, pd.DataFrame]) -> TestResult:
    """
    Friedman検定。行が被験者（録音）、列が処理（システム）。
    Returns:
        TestResult: statistic=χ²（同順位補正あり）、df=k-1、effect_size=Kendall's W。
    Raises:
        PreconditionError: 欠損セル、2×2 未満。
        DegenerateTestError: すべての行が全同順位。
    """
    data = np.asarray(matrix, dtype=float)
    if data.ndim != 2:
        raise PreconditionError("2次元の行列が必要です")
    n, k = data.shape
    if n < 2 or k < 2:
        raise PreconditionError(f"被験者2以上・処理2以上が必要です: {n}×{k}")
    if np.isnan(data).any():
        raise PreconditionError("欠損セルがあります")

    ranks = sps.rankdata(data, axis=1)
    rank_sums = ranks.sum(axis=0)
    statistic = 12.0 / (n * k * (k + 1)) * float(np.sum(rank_sums ** 2)) - 3.0 * n * (k + 1)

    ties = 0.0
    for row in data:
        _, counts = np.unique(row, return_counts=True)
        ties += float(np.sum(counts ** 3 - counts))
    correction = 1.0 - ties / (n * (k ** 3 - k))
    if correction <= 0:
        raise DegenerateTestError("すべての行が同順位のため検定できません")
    statistic = max(0.0, statistic / correction)

    dof = k - 1
    w = min(1.0, statistic / (n * dof))
    return TestResult(
        statistic=statistic,
        df=dof,
        p_value=_clip_p(sps.chi2.sf(statistic, dof)),
        effect_size=w,
        n=n,
    )


def paired_t(x: Sequence[float], y: Sequence[float]) -> TestResult:
    """
    対応のあるt検定（両側）。
    Returns:
        TestResult: statistic=t、df=n-1、effect_size=Cohen's d_z（差の平均 / 差の標準偏差）。
    Raises:
        PreconditionError: 長さ不一致、2組未満。
        DegenerateTestError: 差の分散が0。
    """
    a = np.asarray(x, dtype=float)
    b = np.asarray(y, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise PreconditionError(f"長さが一致しません: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise PreconditionError("2組以上必要です")

    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd <= _ZERO_VARIANCE_TOL * max(1.0, abs(mean)):
        raise DegenerateTestError("差の分散が0のため検定できません")

    t = mean / (sd / math.sqrt(n))
    dof = n - 1
    return TestResult(
        statistic=t,
        df=dof,
        p_value=_clip_p(2.0 * sps.t.sf(abs(t), dof)),
        effect_size=mean / sd,
        n=n,
    )


def spearman(x: Sequence[float], y: Sequence[float]) -> TestResult:
    """
    スピアマンの順位相関。
    Returns:
        TestResult: statistic=ρ、df=n-2、p は t = ρ√((n-2)/(1-ρ²)) の両側確率。
    Raises:
        PreconditionError: 長さ不一致、3組未満。
        UndefinedCorrelationError: どちらかが定数。
    """
    a = np.asarray(x, dtype=float)
    b = np.asarray(y, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise PreconditionError(f"長さが一致しません: {a.shape} vs {b.shape}")
    n = a.size
    if n < 3:
        raise PreconditionError("3組以上必要です")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise UndefinedCorrelationError("定数ベクトルでは相関を定義できません")

    ra = sps.rankdata(a)
    rb = sps.rankdata(b)
    rho = float(np.clip(np.corrcoef(ra, rb)[0, 1], -1.0, 1.0))
    dof = n - 2
    if abs(rho) >= 1.0:
        p = 0.0
    else:
        t = rho * math.sqrt(dof / (1.0 - rho * rho))
        p = 2.0 * sps.t.sf(abs(t), dof)
    return TestResult(statistic=rho, df=dof, p_value=_clip_p(p), n=n)


def chi_square_counts(observed: Union[Sequence[Sequence[float]], np.ndarray]) -> TestResult:
    """
    度数表の均一性のピアソンχ²検定。
    Returns:
        TestResult: df=(r-1)(c-1)、effect_size=Cramér's V。
    Raises:
        PreconditionError: 負の度数。
        DegenerateTestError: 1行・1列の表、合計0の行・列、期待度数1未満のセル。
    """
    table = np.asarray(observed, dtype=float)
    if table.ndim != 2 or table.shape[0] < 2 or table.shape[1] < 2:
        raise DegenerateTestError(f"2×2 以上の表が必要です: {table.shape}")
    if (table < 0).any():
        raise PreconditionError("度数は0以上です")

    rows = table.sum(axis=1)
    cols = table.sum(axis=0)
    total = table.sum()
    if (rows == 0).any() or (cols == 0).any():
        raise DegenerateTestError("合計0の行または列があります")

    expected = np.outer(rows, cols) / total
    if (expected < 1).any():
        raise DegenerateTestError("期待度数が1未満のセルがあります")

    statistic = float(np.sum((table - expected) ** 2 / expected))
    r, c = table.shape
    dof = (r - 1) * (c - 1)
    cramers_v = math.sqrt(statistic / (total * (min(r, c) - 1)))
    return TestResult(
        statistic=statistic,
        df=dof,
        p_value=_clip_p(sps.chi2.sf(statistic, dof)),
        effect_size=cramers_v,
        n=int(total),
    )


def pairwise_chi_square(
    observed: Union[Sequence[Sequence[float]], np.ndarray],
    labels: Sequence[str],
    correction: bool = True,
) -> List[Dict[str, Any]]:
    """
    度数表の行どうしの全ペアでχ²検定を行い、Bonferroni 補正した p値を付ける。
    Args:
        observed: 行がシステム、列が結果（例: 保持/欠落）の度数表。
        labels (Sequence[str]): 行のラベル。
        correction (bool): 2×2 表に Yates の連続性補正をかける。
    Returns:
        list[dict]: ペアごとに {"pair", "statistic", "df", "p_value", "p_adjusted", "effect_size", "n"}。
        両方の行で0の列は除く。列が1つしか残らないペアは statistic 以下が None。
    Raises:
        DegenerateTestError: 行が2未満。
        PreconditionError: 行数とラベル数が合わない、負の度数。
    Note:
        p_adjusted = min(1, p * m)。m はペアの総数 k(k-1)/2。
    """
    table = np.asarray(observed, dtype=float)
    if table.ndim != 2 or table.shape[0] < 2:
        raise DegenerateTestError(f"2行以上の表が必要です: {table.shape}")
    if len(labels) != table.shape[0]:
        raise PreconditionError(f"ラベル数 {len(labels)} と行数 {table.shape[0]} が合いません")
    if (table < 0).any():
        raise PreconditionError("度数は0以上です")

    pairs = list(itertools.combinations(range(table.shape[0]), 2))
    rows = []
    for a, b in pairs:
        sub = table[[a, b]]
        sub = sub[:, sub.sum(axis=0) > 0]
        row: Dict[str, Any] = {"pair": [labels[a], labels[b]], "n": int(sub.sum())}
        if sub.shape[1] < 2 or (sub.sum(axis=1) == 0).any():
            row.update(statistic=None, df=None, p_value=None, p_adjusted=None, effect_size=None)
        else:
            statistic, p_value, dof, _ = sps.chi2_contingency(sub, correction=correction)
            row.update(
                statistic=float(statistic),
                df=int(dof),
                p_value=_clip_p(p_value),
                p_adjusted=_clip_p(p_value * len(pairs)),
                effect_size=math.sqrt(float(statistic) / sub.sum()),
            )
        rows.append(row)
    return rows
