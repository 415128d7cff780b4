import csv
import io
import random
from functools import lru_cache

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asrdefense.metrics import (BoxStats, CellResult, ErrorCounts, TranscriptSet, WerReport, align,
                                box_stats, boxplot_csv, normalize, pooled_report, results_csv,
                                summarize_boxplot, wer)

ACTUAL = "This is the human ASR output"
BENIGN = "Thus is the real ASR output"
TARGET = "Transfer $1000 from my account"
ADVERSARIAL = "Transfer is sand from my account"


def oracle_distance(ref, hyp):
    """Memoized recursive edit distance, independent of the DP table in ``align``."""
    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]))
    return d(len(ref), len(hyp))


def test_identity():
    assert wer(["a", "b", "c"], ["a", "b", "c"]) == (0.0, 0, 0, 0)


def test_transcript_examples():
    pct, s, i, d = wer(ACTUAL, BENIGN)
    assert (round(pct, 2), s, i, d) == (33.33, 2, 0, 0)
    pct, s, i, d = wer(TARGET, ADVERSARIAL)
    assert (round(pct, 2), s, i, d) == (40.00, 1, 1, 0)


def test_normalization_keeps_dollar_amounts():
    assert normalize("Transfer $1,000 from MY account!") == ["transfer", "$1", "000", "from", "my", "account"]
    assert normalize(TARGET)[1] == "$1000"


def test_prefers_substitution_on_ties():
    assert wer(["a", "b"], ["c", "d"])[1:] == (2, 0, 0)


def test_can_exceed_hundred():
    assert wer(["a"], ["b", "c", "d"])[0] == 300.0


def test_empty_reference():
    with pytest.raises(ValueError):
        wer([], ["a"])
    with pytest.raises(ValueError):
        TranscriptSet((), ("a",))


def test_fuzzed_against_oracle():
    rng = random.Random(0)
    vocab = list("abcdef")
    for _ in range(1000):
        ref = tuple(rng.choice(vocab) for _ in range(rng.randint(1, 10)))
        hyp = tuple(rng.choice(vocab) for _ in range(rng.randint(0, 10)))
        c = align(ref, hyp)
        assert c.errors == oracle_distance(ref, hyp), (ref, hyp)
        # the counts must describe an actual alignment
        assert len(ref) - c.dele + c.ins == len(hyp)


words = st.lists(st.sampled_from(["a", "b", "c", "d"]), min_size=1, max_size=8)


@settings(max_examples=200, deadline=None)
@given(t=words)
def test_self_distance_zero(t):
    assert wer(t, t)[0] == 0


@settings(max_examples=50, deadline=None)
@given(pairs=st.lists(st.tuples(words, words), min_size=1, max_size=6), seed=st.integers(0, 1000))
def test_pooled_report_is_order_invariant_and_pools_counts(pairs, seed):
    sets = [TranscriptSet(tuple(r), tuple(r), None, tuple(h)) for r, h in pairs]
    shuffled = sets[:]
    random.Random(seed).shuffle(shuffled)
    a, b = pooled_report(sets), pooled_report(shuffled)
    assert a.gt_wer == b.gt_wer
    total = sum((align(r, h) for r, h in pairs), ErrorCounts())
    assert a.gt_wer == pytest.approx(100 * total.errors / total.ref_len)
    assert a.benign_wer == 0
    assert a.tgt_wer is None


def test_report_tgt_only_when_targeted():
    r = WerReport()
    r.add(TranscriptSet(("a", "b"), ("a", "b"), ("c", "d"), ("c", "b")))
    assert r.gt_wer == 50 and r.tgt_wer == 50 and r.n_utts == 1


def test_box_stats():
    assert box_stats([7.0]) == BoxStats(7, 7, 7, 7, 7, 1)
    s = box_stats([5, 1, 3, 2, 4])
    assert (s.q1, s.median, s.q3) == (2, 3, 4)
    with pytest.raises(ValueError):
        box_stats([])


def _cell(system, eps, gt_errors, iters=7):
    report = WerReport()
    report.add(TranscriptSet(("a",) * 10, ("a",) * 10, None, ("b",) * gt_errors + ("a",) * (10 - gt_errors)))
    return CellResult(system, "Linf", eps, iters, report)


def test_boxplot_excludes_large_budget():
    cells = [_cell("S", 0.01, 1), _cell("S", 0.1, 5), _cell("S", 0.2, 10)]
    stats = summarize_boxplot(cells)
    assert stats["S"].n == 2 and stats["S"].maximum == 50
    assert summarize_boxplot(cells, exclude_eps=())["S"].maximum == 100


def test_csv_layouts():
    cells = [_cell("Baseline", 0.01, 2), _cell("DENOISER", 0.1, 3, iters=1)]
    rows = list(csv.reader(io.StringIO(results_csv(cells))))
    assert rows[0] == ["system", "norm", "epsilon", "iterations", "benign_wer", "gt_wer", "tgt_wer", "n_utts"]
    assert rows[1] == ["Baseline", "Linf", "0.01", "7", "0.00", "20.00", "", "1"]
    box = list(csv.reader(io.StringIO(boxplot_csv(summarize_boxplot(cells)))))
    assert box[0] == ["system", "min", "q1", "median", "q3", "max", "n_settings"]
    assert len(box) == 3
