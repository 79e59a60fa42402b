"""
アライメントモジュール
======================
参照・仮説トークン列の最小編集距離アライメントと H/S/D/I 集計。

評価値表は系列の末尾側から（接尾辞どうしの距離として）埋め、
先頭から前向きにたどって操作列を復元する。最小コストのうちヒット数が
最大のものを選び、それでも残る同点は hit > substitution > deletion > insertion
の順で選ぶので、同じ入力からは常に同じ操作列が得られる。
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from modules.errors import PreconditionError

HIT = "hit"
SUBSTITUTION = "substitution"
DELETION = "deletion"
INSERTION = "insertion"

_SHORT = {HIT: "H", SUBSTITUTION: "S", DELETION: "D", INSERTION: "I"}

__all__ = [
    "EditOp",
    "ErrorCounts",
    "Alignment",
    "align",
    "project_span",
    "render_alignment",
]


@dataclass(frozen=True)
class EditOp:
    kind: str
    ref_index: Optional[int] = None
    hyp_index: Optional[int] = None

    def __post_init__(self):
        if self.kind in (HIT, SUBSTITUTION):
            ok = self.ref_index is not None and self.hyp_index is not None
        elif self.kind == DELETION:
            ok = self.ref_index is not None and self.hyp_index is None
        elif self.kind == INSERTION:
            ok = self.ref_index is None and self.hyp_index is not None
        else:
            ok = False
        if not ok:
            raise ValueError(f"不正な編集操作: {self}")


@dataclass(frozen=True)
class ErrorCounts:
    hits: int = 0
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def reference_length(self) -> int:
        return self.hits + self.substitutions + self.deletions

    @property
    def hypothesis_length(self) -> int:
        return self.hits + self.substitutions + self.insertions

    def to_dict(self) -> dict:
        return {
            "hits": self.hits,
            "substitutions": self.substitutions,
            "deletions": self.deletions,
            "insertions": self.insertions,
        }


@dataclass(frozen=True)
class Alignment:
    ops: Tuple[EditOp, ...]
    counts: ErrorCounts


def _suffix_keys(reference: Sequence[str], hypothesis: Sequence[str]) -> Tuple[np.ndarray, int]:
    """
    接尾辞どうしのアライメントの評価値表を作る。
    Returns:
        tuple[np.ndarray, int]: (key, scale)。key[i, j] = cost * scale - hits で、
        reference[i:] と hypothesis[j:] の最小編集距離を第1に、
        その中でのヒット数最大を第2に最適化した値。
    Note:
        第2基準があるので参照と仮説を入れ替えても H は変わらず、D と I が入れ替わるだけになる。
    """
    n, m = len(reference), len(hypothesis)
    scale = min(n, m) + 1
    key = np.zeros((n + 1, m + 1), dtype=np.int64)
    key[:, m] = np.arange(n, -1, -1) * scale
    key[n, :] = np.arange(m, -1, -1) * scale
    # 行は Python の int のリストで埋めてから書き戻す
    below = key[n].tolist()
    for i in range(n - 1, -1, -1):
        ref_tok = reference[i]
        row = [0] * m + [below[m] + scale]
        for j in range(m - 1, -1, -1):
            diag = below[j + 1] - 1 if ref_tok == hypothesis[j] else below[j + 1] + scale
            row[j] = min(diag, below[j] + scale, row[j + 1] + scale)
        key[i] = row
        below = row
    return key, scale


def align(reference: Sequence[str], hypothesis: Sequence[str]) -> Alignment:
    """
    参照と仮説の最小コストアライメントを求める。
    Args:
        reference (Sequence[str]): 参照トークン列（空でもよい）。
        hypothesis (Sequence[str]): 仮説トークン列（空でもよい）。
    Returns:
        Alignment: 単調な操作列と H/S/D/I 集計。
    Note:
        - S+D+I は全アライメント中で最小。そのうえでヒット数が最大。
        - 残る同点は先頭側から hit > substitution > deletion > insertion の順で決める。
    """
    n, m = len(reference), len(hypothesis)
    key, scale = _suffix_keys(reference, hypothesis)

    ops: List[EditOp] = []
    tally = {HIT: 0, SUBSTITUTION: 0, DELETION: 0, INSERTION: 0}
    i = j = 0
    while i < n or j < m:
        if i < n and j < m:
            here = key[i, j]
            same = reference[i] == hypothesis[j]
            if same and here == key[i + 1, j + 1] - 1:
                kind = HIT
            elif not same and here == key[i + 1, j + 1] + scale:
                kind = SUBSTITUTION
            elif here == key[i + 1, j] + scale:
                kind = DELETION
            else:
                kind = INSERTION
        elif i < n:
            kind = DELETION
        else:
            kind = INSERTION

        if kind in (HIT, SUBSTITUTION):
            ops.append(EditOp(kind, i, j))
            i += 1
            j += 1
        elif kind == DELETION:
            ops.append(EditOp(kind, ref_index=i))
            i += 1
        else:
            ops.append(EditOp(kind, hyp_index=j))
            j += 1
        tally[kind] += 1

    counts = ErrorCounts(
        hits=tally[HIT],
        substitutions=tally[SUBSTITUTION],
        deletions=tally[DELETION],
        insertions=tally[INSERTION],
    )
    return Alignment(ops=tuple(ops), counts=counts)


def project_span(
    alignment: Alignment,
    ref_start: int,
    ref_end: int,
    boundary_rule: str = "inside-only",
) -> Optional[Tuple[int, int]]:
    """
    参照側の区間 [ref_start, ref_end] に対応する仮説側の区間を返す。
    Args:
        alignment (Alignment): align() の結果。
        ref_start (int): 参照の開始位置（含む）。
        ref_end (int): 参照の終了位置（含む）。
        boundary_rule (str): 現状 "inside-only" のみ。
    Returns:
        tuple[int, int] | None: 仮説側の (開始, 終了)（両端含む）。
        区間内の参照語がすべて削除されていれば None（空区間）。
    Raises:
        PreconditionError: 区間が参照の範囲外。
    Note:
        - 区間端の挿入は含めない。区間内の2つのアンカー間の挿入は含まれる。
    """
    if boundary_rule != "inside-only":
        raise PreconditionError(f"未対応の境界ルール: {boundary_rule}")
    ref_length = alignment.counts.reference_length
    if not (0 <= ref_start <= ref_end < ref_length):
        raise PreconditionError(
            f"区間 [{ref_start}, {ref_end}] が参照長 {ref_length} の範囲外です"
        )

    anchors = [
        op.hyp_index
        for op in alignment.ops
        if op.kind in (HIT, SUBSTITUTION) and ref_start <= op.ref_index <= ref_end
    ]
    if not anchors:
        return None
    return min(anchors), max(anchors)


def render_alignment(alignment: Alignment, reference: Sequence[str], hypothesis: Sequence[str]) -> str:
    """REF/HYP/EVAL の3行でアライメントを表示する（デバッグログ用）"""
    ref_row, hyp_row, eval_row = [], [], []
    for op in alignment.ops:
        ref_tok = reference[op.ref_index] if op.ref_index is not None else "*" * 3
        hyp_tok = hypothesis[op.hyp_index] if op.hyp_index is not None else "*" * 3
        width = max(len(ref_tok), len(hyp_tok), 1)
        ref_row.append(ref_tok.ljust(width))
        hyp_row.append(hyp_tok.ljust(width))
        eval_row.append(("" if op.kind == HIT else _SHORT[op.kind]).ljust(width))
    return "\n".join([
        "REF:  " + " ".join(ref_row),
        "HYP:  " + " ".join(hyp_row),
        "EVAL: " + " ".join(eval_row),
    ])
