import itertools
import random
from functools import lru_cache

import pytest

from modules.align import (
    DELETION,
    HIT,
    INSERTION,
    SUBSTITUTION,
    EditOp,
    align,
    project_span,
    render_alignment,
)
from modules.errors import PreconditionError
from modules.metrics import mer

ALPHABET = ("a", "b", "c")


def _brute_distance(ref, hyp):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(ref):
            return len(hyp) - j
        if j == len(hyp):
            return len(ref) - i
        return min(
            go(i + 1, j + 1) + (ref[i] != hyp[j]),
            go(i + 1, j) + 1,
            go(i, j + 1) + 1,
        )
    return go(0, 0)


def _sequences(max_len):
    for n in range(max_len + 1):
        yield from itertools.product(ALPHABET, repeat=n)


def test_worked_example_counts():
    result = align("please open the windows".split(), "open a window".split())
    c = result.counts
    assert (c.hits, c.substitutions, c.deletions, c.insertions) == (1, 2, 1, 0)


def test_identical_sequences_are_all_hits():
    seq = ["the", "man", "stood"]
    result = align(seq, seq)
    assert [op.kind for op in result.ops] == [HIT, HIT, HIT]
    assert result.counts.errors == 0


def test_empty_inputs():
    assert align([], []).ops == ()
    only_del = align(["a", "b"], [])
    assert only_del.counts.deletions == 2
    only_ins = align([], ["a"])
    assert only_ins.counts.insertions == 1


def test_exhaustive_against_brute_force_short():
    # 長さ4以下は全組み合わせ
    seqs = list(_sequences(4))
    for ref in seqs:
        for hyp in seqs:
            result = align(ref, hyp)
            expected = _brute_distance(ref, hyp)
            assert result.counts.errors == expected, (ref, hyp)
            assert result.counts.reference_length == len(ref)
            assert result.counts.hypothesis_length == len(hyp)


def _first_occurrence_ordered(seq):
    seen = list(dict.fromkeys(seq))
    return seen == list(ALPHABET[: len(seen)])


def _prefix_distances(ref, max_len):
    """仮説を1語ずつ伸ばして全列挙し、(仮説, ref との距離) を返す"""
    stack = [((), list(range(len(ref) + 1)))]
    while stack:
        hyp, column = stack.pop()
        yield hyp, column[-1]
        if len(hyp) == max_len:
            continue
        for tok in ALPHABET:
            nxt = [column[0] + 1]
            for i, ref_tok in enumerate(ref):
                nxt.append(min(column[i] + (ref_tok != tok), column[i + 1] + 1, nxt[i] + 1))
            stack.append((hyp + (tok,), nxt))


def test_exhaustive_against_oracle_up_to_six():
    # 記号の付け替えで結果は変わらないので、参照は初出順 a, b, c の列に限ってよい
    refs = [seq for seq in _sequences(6) if _first_occurrence_ordered(seq)]
    assert len(refs) == 186
    checked = 0
    for ref in refs:
        for hyp, distance in _prefix_distances(ref, 6):
            counts = align(ref, hyp).counts
            assert counts.errors == distance, (ref, hyp)
            if ref or hyp:
                assert mer(counts) == distance / (distance + counts.hits)
            checked += 1
    assert checked == 186 * 1093


def test_ops_are_monotone_and_cover_both_sequences():
    rng = random.Random(7)
    for _ in range(500):
        ref = [rng.choice(ALPHABET) for _ in range(rng.randint(0, 8))]
        hyp = [rng.choice(ALPHABET) for _ in range(rng.randint(0, 8))]
        ops = align(ref, hyp).ops
        ref_idx = [op.ref_index for op in ops if op.ref_index is not None]
        hyp_idx = [op.hyp_index for op in ops if op.hyp_index is not None]
        assert ref_idx == list(range(len(ref)))
        assert hyp_idx == list(range(len(hyp)))
        for op in ops:
            if op.kind == HIT:
                assert ref[op.ref_index] == hyp[op.hyp_index]
            if op.kind == SUBSTITUTION:
                assert ref[op.ref_index] != hyp[op.hyp_index]


def test_swapping_sides_swaps_deletions_and_insertions():
    rng = random.Random(8)
    for _ in range(500):
        ref = [rng.choice(ALPHABET) for _ in range(rng.randint(0, 7))]
        hyp = [rng.choice(ALPHABET) for _ in range(rng.randint(0, 7))]
        forward = align(ref, hyp).counts
        backward = align(hyp, ref).counts
        assert forward.hits == backward.hits
        assert forward.substitutions == backward.substitutions
        assert forward.deletions == backward.insertions
        assert forward.insertions == backward.deletions


def test_tie_break_is_deterministic_and_prefers_substitution():
    ref = ["a", "b", "c", "d"]
    hyp = ["a", "x", "d"]
    first = align(ref, hyp)
    assert first == align(ref, hyp)
    assert [op.kind for op in first.ops] == [HIT, SUBSTITUTION, DELETION, HIT]


def test_project_span():
    ref = ["a", "b", "c", "d"]
    hyp = ["a", "x", "d"]
    alignment = align(ref, hyp)
    assert project_span(alignment, 1, 1) == (1, 1)
    assert project_span(alignment, 2, 2) is None
    assert project_span(alignment, 1, 2) == (1, 1)
    assert project_span(alignment, 0, 3) == (0, 2)


def test_project_span_insertions():
    inner = align(["a", "b"], ["a", "z", "b"])
    assert project_span(inner, 0, 1) == (0, 2)
    edge = align(["a", "b"], ["z", "a", "b"])
    assert project_span(edge, 0, 0) == (1, 1)


def test_project_span_bounds():
    alignment = align(["a", "b"], ["a", "b"])
    with pytest.raises(PreconditionError):
        project_span(alignment, 0, 2)
    with pytest.raises(PreconditionError):
        project_span(alignment, 1, 0)
    with pytest.raises(PreconditionError):
        project_span(alignment, 0, 1, boundary_rule="outside")


def test_edit_op_validation():
    EditOp(DELETION, ref_index=0)
    with pytest.raises(ValueError):
        EditOp(INSERTION, ref_index=0, hyp_index=0)
    with pytest.raises(ValueError):
        EditOp("swap", 0, 0)


def test_render_alignment():
    ref = "please open the windows".split()
    hyp = "open a window".split()
    text = render_alignment(align(ref, hyp), ref, hyp)
    lines = text.splitlines()
    assert len(lines) == 3
    assert lines[0].startswith("REF:")
    assert lines[1].startswith("HYP:") and "***" in lines[1]
    assert lines[2].split()[1:] == ["D", "S", "S"]
