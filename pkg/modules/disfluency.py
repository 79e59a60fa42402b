"""
非流暢性評価モジュール
======================
フィラー・反復・言い直し（リビジョン）の3種類を検出し、参照書き起こしと比べて採点する。

* フィラー ― NormalizationConfig.filler_tokens に含まれるトークンを数える
* 反復 ― 1語または2語の直後の完全一致。左から貪欲に走査し、2語単位を優先
* リビジョン ― 人手アノテーションの区間を仮説側へ射影し、局所的に再アライメントしてMERを出す

率はいずれも「合計どうしの比」で、コーパス単位では録音ごとの生カウントを合算して求める。
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

from modules.align import Alignment, align, project_span
from modules.errors import PreconditionError, UndefinedMetricError
from modules.file_handler import load_json_file
from modules.metrics import mer as match_error_rate
from modules.textnorm import DEFAULT_CONFIG, NormalizationConfig

_LOGGER = logging.getLogger(__name__)

__all__ = [
    "FillerCount",
    "Repetition",
    "RevisionSpan",
    "RevisionScore",
    "DisfluencyReport",
    "count_fillers",
    "filler_detection_rate",
    "detect_repetitions",
    "repetition_retained",
    "repetition_retention_rate",
    "score_revision",
    "analyze",
    "load_annotations",
]


@dataclass(frozen=True)
class FillerCount:
    count: int
    positions: Tuple[int, ...]


@dataclass(frozen=True)
class Repetition:
    """unit が copies 回連続して start から現れる"""

    unit: Tuple[str, ...]
    start: int
    copies: int

    def __post_init__(self):
        if len(self.unit) not in (1, 2):
            raise ValueError(f"反復の単位は1語か2語です: {self.unit}")
        if self.copies < 2:
            raise ValueError(f"反復は2回以上必要です: {self.copies}")

    @property
    def end(self) -> int:
        """最後のトークンの次の位置"""
        return self.start + self.copies * len(self.unit)

    @property
    def events(self) -> int:
        return self.copies - 1


@dataclass(frozen=True)
class RevisionSpan:
    ref_start: int
    ref_end: int  # 含む
    label: str = ""

    def __post_init__(self):
        if not 0 <= self.ref_start <= self.ref_end:
            raise PreconditionError(f"不正なリビジョン区間: [{self.ref_start}, {self.ref_end}]")


class RevisionScore(NamedTuple):
    span: RevisionSpan
    mer: float
    accuracy: float


@dataclass(frozen=True)
class DisfluencyReport:
    # 参照側にフィラー・反復が無い録音では None
    filler_detection_rate: Optional[float]
    repetition_retention_rate: Optional[float]
    revision_scores: Tuple[RevisionScore, ...]
    reference_fillers: int = 0
    hypothesis_fillers: int = 0
    reference_repetitions: int = 0
    retained_repetitions: int = 0

    def to_dict(self) -> dict:
        return {
            "filler_detection_rate": self.filler_detection_rate,
            "repetition_retention_rate": self.repetition_retention_rate,
            "reference_fillers": self.reference_fillers,
            "hypothesis_fillers": self.hypothesis_fillers,
            "reference_repetitions": self.reference_repetitions,
            "retained_repetitions": self.retained_repetitions,
            "revisions": [
                {
                    "ref_start": s.span.ref_start,
                    "ref_end": s.span.ref_end,
                    "label": s.span.label,
                    "mer": s.mer,
                    "accuracy": s.accuracy,
                }
                for s in self.revision_scores
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DisfluencyReport":
        scores = tuple(
            RevisionScore(
                span=RevisionSpan(int(r["ref_start"]), int(r["ref_end"]), r.get("label", "")),
                mer=float(r["mer"]),
                accuracy=float(r["accuracy"]),
            )
            for r in data.get("revisions") or []
        )
        return cls(
            filler_detection_rate=data.get("filler_detection_rate"),
            repetition_retention_rate=data.get("repetition_retention_rate"),
            revision_scores=scores,
            reference_fillers=int(data.get("reference_fillers") or 0),
            hypothesis_fillers=int(data.get("hypothesis_fillers") or 0),
            reference_repetitions=int(data.get("reference_repetitions") or 0),
            retained_repetitions=int(data.get("retained_repetitions") or 0),
        )


def count_fillers(seq: Sequence[str], config: NormalizationConfig = DEFAULT_CONFIG) -> FillerCount:
    """フィラートークンの出現をすべて数える（参照に無いものも含む）"""
    positions = tuple(i for i, tok in enumerate(seq) if tok in config.filler_tokens)
    return FillerCount(count=len(positions), positions=positions)


def filler_detection_rate(ref_total: int, hyp_total: int) -> float:
    """
    フィラー検出率 = 仮説のフィラー数 / 参照のフィラー数。
    Raises:
        UndefinedMetricError: 参照のフィラー数が0。
    Note:
        過剰検出があると1を超える。
    """
    if ref_total < 0 or hyp_total < 0:
        raise PreconditionError(f"カウントは0以上です: {ref_total}, {hyp_total}")
    if ref_total == 0:
        raise UndefinedMetricError("参照にフィラーが無いため検出率を定義できません")
    return hyp_total / ref_total


def _run_length(seq: Sequence[str], start: int, width: int) -> int:
    """start から width 語単位が何回続くか"""
    unit = list(seq[start:start + width])
    copies = 1
    pos = start + width
    while list(seq[pos:pos + width]) == unit:
        copies += 1
        pos += width
    return copies


def detect_repetitions(seq: Sequence[str]) -> List[Repetition]:
    """
    直後に完全一致で繰り返される1語・2語の単位を検出する。
    Returns:
        list[Repetition]: 出現順、重なりなし。
    Note:
        - 同じ開始位置では2語単位を優先する（"on the on the" は1件）。
        - c回の連続は c-1 件の反復として数える。
        - フィラーも通常の語として扱う（"uh uh" は反復1件）。
    """
    found: List[Repetition] = []
    i, n = 0, len(seq)
    while i < n:
        for width in (2, 1):
            if i + 2 * width > n:
                continue
            # "the the" の2語単位は1語単位の反復として扱う
            if width == 2 and seq[i] == seq[i + 1]:
                continue
            copies = _run_length(seq, i, width)
            if copies >= 2:
                rep = Repetition(unit=tuple(seq[i:i + width]), start=i, copies=copies)
                found.append(rep)
                i = rep.end
                break
        else:
            i += 1
    return found


def _has_self_repetition(window: Sequence[str], width: int) -> bool:
    for k in range(len(window) - 2 * width + 1):
        if list(window[k:k + width]) == list(window[k + width:k + 2 * width]):
            return True
    return False


def repetition_retained(alignment: Alignment, rep: Repetition, hyp: Sequence[str]) -> bool:
    """
    参照の反復が仮説に残っているか判定する。
    Note:
        参照側の反復区間を仮説へ射影し、その範囲に同じ単位長の直後反復があれば残存とみなす。
        語形は参照と違ってもよい（"stood stood" も残存）。
    """
    projected = project_span(alignment, rep.start, rep.end - 1)
    if projected is None:
        return False
    start, end = projected
    return _has_self_repetition(hyp[start:end + 1], len(rep.unit))


def repetition_retention_rate(retained: int, total: int) -> float:
    """
    反復保持率 = 残った参照反復数 / 参照反復数。
    Raises:
        UndefinedMetricError: 参照反復数が0。
        PreconditionError: retained が total を超える。
    """
    if total == 0:
        raise UndefinedMetricError("参照に反復が無いため保持率を定義できません")
    if not 0 <= retained <= total:
        raise PreconditionError(f"保持数が範囲外です: {retained}/{total}")
    return retained / total


def score_revision(
    reference: Sequence[str],
    hypothesis: Sequence[str],
    span: RevisionSpan,
    alignment: Alignment,
) -> Tuple[float, float]:
    """
    リビジョン区間のMERと正解率を求める。
    Returns:
        tuple[float, float]: (mer, accuracy)。
    Note:
        区間内の参照語がすべて削除されていれば mer = 1.0。
    """
    projected = project_span(alignment, span.ref_start, span.ref_end)
    if projected is None:
        return 1.0, 0.0
    start, end = projected
    local = align(reference[span.ref_start:span.ref_end + 1], hypothesis[start:end + 1])
    value = match_error_rate(local.counts)
    return value, 1.0 - value


def analyze(
    reference: Sequence[str],
    hypothesis: Sequence[str],
    spans: Sequence[RevisionSpan] = (),
    config: NormalizationConfig = DEFAULT_CONFIG,
    alignment: Optional[Alignment] = None,
) -> DisfluencyReport:
    """
    1録音分のフィラー・反復・リビジョンをまとめて評価する。
    Args:
        reference (Sequence[str]): 正規化済みの参照トークン列。
        hypothesis (Sequence[str]): 正規化済みの仮説トークン列。
        spans (Sequence[RevisionSpan]): リビジョンのアノテーション。
        config (NormalizationConfig): フィラー語の定義。
        alignment (Alignment | None): 計算済みなら再利用する。
    Returns:
        DisfluencyReport: 率と、合算用の生カウント。
    """
    if alignment is None:
        alignment = align(reference, hypothesis)

    ref_fillers = count_fillers(reference, config).count
    hyp_fillers = count_fillers(hypothesis, config).count

    repetitions = detect_repetitions(reference)
    ref_events = sum(rep.events for rep in repetitions)
    # 1つの連続は全件残存か全件欠落のどちらかとして数える
    retained = sum(rep.events for rep in repetitions if repetition_retained(alignment, rep, hypothesis))

    scores = []
    for span in spans:
        value, accuracy = score_revision(reference, hypothesis, span, alignment)
        scores.append(RevisionScore(span=span, mer=value, accuracy=accuracy))

    _LOGGER.debug(
        "フィラー %d/%d 反復 %d/%d リビジョン %d件",
        hyp_fillers, ref_fillers, retained, ref_events, len(scores),
    )
    return DisfluencyReport(
        filler_detection_rate=filler_detection_rate(ref_fillers, hyp_fillers) if ref_fillers else None,
        repetition_retention_rate=repetition_retention_rate(retained, ref_events) if ref_events else None,
        revision_scores=tuple(scores),
        reference_fillers=ref_fillers,
        hypothesis_fillers=hyp_fillers,
        reference_repetitions=ref_events,
        retained_repetitions=retained,
    )


def load_annotations(path, reference_length: Optional[int] = None) -> List[RevisionSpan]:
    """
    リビジョンのアノテーションJSONを読み込む。
    Args:
        path: [{"ref_start", "ref_end", "label"}, ...] 形式、
            または {"revisions": [...]} 形式のJSONファイル。
        reference_length (int | None): 指定すると区間が参照内に収まるか検証する。
    Raises:
        PreconditionError: 読み込めない、形式不正、区間が範囲外。
    """
    data = load_json_file(path)
    if isinstance(data, dict):
        data = data.get("revisions")
    if not isinstance(data, list):
        raise PreconditionError(f"アノテーションを読み込めません: {path}")

    spans = []
    for item in data:
        try:
            span = RevisionSpan(int(item["ref_start"]), int(item["ref_end"]), str(item.get("label", "")))
        except (KeyError, TypeError, ValueError) as e:
            raise PreconditionError(f"アノテーション形式が不正です: {path} ({e})") from e
        if reference_length is not None and span.ref_end >= reference_length:
            raise PreconditionError(
                f"区間 [{span.ref_start}, {span.ref_end}] が参照長 {reference_length} を超えています: {path}"
            )
        spans.append(span)
    return spans
