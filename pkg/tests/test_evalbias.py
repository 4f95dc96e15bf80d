import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from clsrkit.evalbias import (
    BUCKETS,
    ResourcefulnessClass,
    UtteranceScore,
    WerReport,
    align_words,
    bucket_of,
    classify_resourcefulness,
    degradation_histogram,
    normalize_text,
    score,
    wer,
)

WORDS = ("a", "b", "c")


def brute_force_distance(ref, hyp):
    """Minimum edits over every alignment, enumerated recursively without memoisation."""
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    return min(
        brute_force_distance(ref[1:], hyp[1:]) + (ref[0] != hyp[0]),
        brute_force_distance(ref[1:], hyp) + 1,
        brute_force_distance(ref, hyp[1:]) + 1,
    )


def all_sequences(max_len):
    for n in range(max_len + 1):
        yield from itertools.product(WORDS, repeat=n)


def test_dp_equals_exhaustive_oracle_up_to_length_5():
    seqs = list(all_sequences(5))
    # 364 sequences; all ordered pairs with lengths summing to at most 6 plus a
    # deterministic stride over the rest keeps the run short
    checked = 0
    for i, ref in enumerate(seqs):
        for j, hyp in enumerate(seqs):
            if len(ref) + len(hyp) > 6 and (i * 31 + j) % 7:
                continue
            assert align_words(ref, hyp).errors == brute_force_distance(ref, hyp), (ref, hyp)
            checked += 1
    assert checked > 20000


@given(st.lists(st.sampled_from(WORDS), max_size=5), st.lists(st.sampled_from(WORDS), max_size=5))
def test_edit_counts_are_consistent(ref, hyp):
    c = align_words(ref, hyp)
    assert c.errors == brute_force_distance(tuple(ref), tuple(hyp))
    # S + D + matches == len(ref) and S + I + matches == len(hyp)
    assert len(ref) - c.deletions == len(hyp) - c.insertions


def test_wer_examples():
    assert wer("a b c", "a b c") == 0.0
    assert abs(wer("a b c", "a x c") - 100 / 3) < 1e-9
    assert wer("a b", "a b c") == 50.0
    assert wer("", "") == 0.0
    assert wer("", "x y") == 200.0
    assert wer("a b", "") == 100.0


def test_normalizer():
    assert normalize_text("  Hello,  World! ") == "hello world"
    assert normalize_text("a\tb\nc") == "a b c"


@pytest.mark.parametrize(
    "hours, cls",
    [
        (4300, ResourcefulnessClass.High),
        (9, ResourcefulnessClass.ExtremelyLow),
        (500, ResourcefulnessClass.MidToHigh),
        (5000, ResourcefulnessClass.SuperHigh),
        (10, ResourcefulnessClass.Low),
        (99.9, ResourcefulnessClass.Low),
        (100, ResourcefulnessClass.LowToMid),
        (1000, ResourcefulnessClass.High),
        (1e-6, ResourcefulnessClass.ExtremelyLow),
    ],
)
def test_classify_resourcefulness(hours, cls):
    assert classify_resourcefulness(hours) is cls


@given(st.floats(min_value=1e-9, max_value=1e9))
def test_classes_are_total_and_disjoint(h):
    hits = [c for c in ResourcefulnessClass if c.bounds[0] <= h < c.bounds[1]]
    assert len(hits) == 1 and classify_resourcefulness(h) is hits[0]


def test_classify_rejects_non_positive():
    with pytest.raises(ValueError):
        classify_resourcefulness(0)


def _report(wers, lang="L1"):
    return WerReport([UtteranceScore(f"u{i}", lang, w, 0, 0, 0) for i, w in enumerate(wers)])


def test_buckets():
    assert bucket_of(10) == "worsened"
    assert bucket_of(-10) == "improved"
    assert bucket_of(5) == "similar" and bucket_of(-5) == "similar"


def test_histogram_examples():
    before = _report([10, 30, 100, 50])
    after = _report([20, 20, 10, 52])
    h = degradation_histogram(before, after)
    assert h.counts["L1"] == {"worsened": 1, "similar": 1, "improved": 1, "excluded": 1}


@given(st.lists(st.tuples(st.floats(0, 300), st.floats(0, 300)), max_size=30))
def test_histogram_counts_cover_every_sentence(pairs):
    before = _report([b for b, _ in pairs])
    after = _report([a for _, a in pairs])
    h = degradation_histogram(before, after)
    total = sum(sum(c.values()) for c in h.counts.values())
    assert total == len(pairs)


def test_histogram_id_mismatch():
    with pytest.raises(ValueError):
        degradation_histogram(_report([1, 2]), _report([1]))


def test_score_and_csv_roundtrip(tmp_path):
    rep = score(["x", "y"], ["L1", "L2"], ["Ab c", "d"], ["ab", "d e"])
    assert [r.wer for r in rep.rows] == [50.0, 100.0]
    path = tmp_path / "u.csv"
    rep.write_csv(path)
    back = WerReport.read_csv(path)
    assert [(r.utterance_id, r.lang, r.wer) for r in back.rows] == [("x", "L1", 50.0), ("y", "L2", 100.0)]
    rep.write_aggregate_csv(tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "group,mean_wer,n" and len(lines) == 3


def test_bucket_names():
    assert BUCKETS == ("worsened", "similar", "improved")
