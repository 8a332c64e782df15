from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laeids.errors import ClassOutOfRange, EmptyMatrix, LengthMismatch, ZeroRate
from laeids.harness.metrics import (ConfusionMatrix, LatencyModel, confusion, detection_latency, evaluate,
                                    metrics)


def test_identity_diagonal():
    cm = confusion([0, 1, 2], [0, 1, 2], 3)
    assert np.array_equal(cm.counts, np.eye(3, dtype=cm.counts.dtype))


def test_hand_computed_example():
    # truth 1 predicted 1 once; truth 0 predicted 1 once; truth 0 predicted 0 twice
    cm = confusion([1, 1, 0, 0], [1, 0, 0, 0], 2)
    assert cm.counts.tolist() == [[2, 1], [0, 1]]
    r = metrics(cm)
    assert r.accuracy == 0.75
    assert r.precision[1] == 0.5
    assert r.recall[1] == 1.0
    assert r.f1[1] == pytest.approx(2 / 3, abs=1e-15)
    # class 0: precision 1, recall 2/3, F1 0.8
    assert r.f1[0] == pytest.approx(0.8, abs=1e-15)
    assert r.macro_f1 == pytest.approx((0.8 + 2 / 3) / 2, abs=1e-15)


def test_all_one_class_balanced():
    assert metrics(confusion([0, 0, 0, 0], [0, 1, 0, 1], 2)).accuracy == 0.5


def test_perfect_diagonal_all_ones():
    r = evaluate([0, 1, 2, 1], [0, 1, 2, 1], ("a", "b", "c"))
    assert (r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1) == (1.0, 1.0, 1.0, 1.0)


def test_zero_over_zero_convention():
    # class 2 never predicted, truly present once: recall 0, precision 0/0 -> 0
    r = metrics(confusion([0, 1, 0], [0, 1, 2], 3))
    assert r.precision[2] == 0.0 and r.recall[2] == 0.0 and r.f1[2] == 0.0


def test_absent_class_excluded_from_macros():
    r = metrics(confusion([0, 1], [0, 1], 3))
    assert r.included_classes == [0, 1]
    assert r.macro_f1 == 1.0


def test_errors():
    with pytest.raises(LengthMismatch):
        confusion([0, 1], [0], 2)
    with pytest.raises(ClassOutOfRange):
        confusion([0, 3], [0, 1], 2)
    with pytest.raises(EmptyMatrix):
        metrics(ConfusionMatrix(np.zeros((2, 2), dtype=np.int64)))


def test_latency_examples():
    assert detection_latency(LatencyModel(100.0, 1000, 0.5)) == 10.5
    assert detection_latency(LatencyModel(100.0, 0, 0.25)) == 0.25
    full = detection_latency(LatencyModel(50.0, 10_000, 0.01))
    tenth = detection_latency(LatencyModel(50.0, 1_000, 0.01))
    assert tenth / full == pytest.approx(0.1, rel=1e-3)
    with pytest.raises(ZeroRate):
        detection_latency(LatencyModel(0.0, 10, 0.0))


def _brute(preds, labels, C):
    counts = [[sum(1 for p, y in zip(preds, labels) if y == i and p == j) for j in range(C)] for i in range(C)]
    n = len(preds)
    acc = Fraction(sum(counts[i][i] for i in range(C)), n)
    prec, rec, f1, inc = [], [], [], []
    for c in range(C):
        tp = counts[c][c]
        col = sum(counts[i][c] for i in range(C))
        row = sum(counts[c])
        p = Fraction(tp, col) if col else Fraction(0)
        r = Fraction(tp, row) if row else Fraction(0)
        f = 2 * p * r / (p + r) if p + r else Fraction(0)
        prec.append(p), rec.append(r), f1.append(f)
        if row or col:
            inc.append(c)
    mean = lambda v: sum(v[c] for c in inc) / len(inc)  # noqa: E731
    return counts, acc, prec, rec, f1, mean(prec), mean(rec), mean(f1)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4).flatmap(
    lambda C: st.tuples(st.just(C), st.integers(1, 50).flatmap(
        lambda n: st.tuples(st.lists(st.integers(0, C - 1), min_size=n, max_size=n),
                            st.lists(st.integers(0, C - 1), min_size=n, max_size=n))))))
def test_matches_bruteforce_recount(case):
    C, (preds, labels) = case
    counts, acc, prec, rec, f1, mp, mr, mf = _brute(preds, labels, C)
    r = metrics(confusion(preds, labels, C))
    assert r.confusion.counts.tolist() == counts
    assert abs(r.accuracy - float(acc)) <= 1e-12
    for c in range(C):
        assert abs(r.precision[c] - float(prec[c])) <= 1e-12
        assert abs(r.recall[c] - float(rec[c])) <= 1e-12
        assert abs(r.f1[c] - float(f1[c])) <= 1e-12
    assert abs(r.macro_precision - float(mp)) <= 1e-12
    assert abs(r.macro_recall - float(mr)) <= 1e-12
    assert abs(r.macro_f1 - float(mf)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=40), st.permutations([0, 1, 2]))
def test_accuracy_trace_and_permutation_invariance(pairs, perm):
    preds, labels = [p for p, _ in pairs], [y for _, y in pairs]
    r = metrics(confusion(preds, labels, 3))
    assert r.accuracy == np.trace(r.confusion.counts) / len(pairs)
    r2 = metrics(confusion([perm[p] for p in preds], [perm[y] for y in labels], 3))
    assert r2.macro_f1 == pytest.approx(r.macro_f1, abs=1e-12)
