from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kernelmerge.metrics import classification_report, confusion_matrix, macro_f1


def brute_force_macro_f1(preds, labels, k):
    """Exact rational oracle built from an explicitly counted confusion matrix."""
    cm = [[0] * k for _ in range(k)]
    for p, t in zip(preds, labels):
        cm[t][p] += 1
    scores = []
    for c in range(k):
        tp = cm[c][c]
        fp = sum(cm[r][c] for r in range(k)) - tp
        fn = sum(cm[c]) - tp
        if tp + fp + fn == 0:
            continue  # absent from both sides
        scores.append(Fraction(2 * tp, 2 * tp + fp + fn))
    return float(sum(scores, Fraction(0)) / len(scores))


def test_hand_case():
    macro, per = macro_f1([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert per[0] == pytest.approx(2 / 3, abs=1e-15)
    assert per[1] == pytest.approx(0.8, abs=1e-15)
    assert macro == pytest.approx(0.7333333333333333, abs=1e-15)


def test_all_correct():
    assert macro_f1([2, 0, 1], [2, 0, 1], 3)[0] == 1.0


def test_absent_class_excluded():
    macro, per = macro_f1([0, 1, 0, 1], [0, 1, 1, 1], 3)
    assert per[2] == 0.0
    assert macro == pytest.approx((2 / 3 + 0.8) / 2, abs=1e-15)


def test_one_sided_class_counts_as_zero():
    macro, _ = macro_f1([0, 0], [0, 1], 2)
    assert macro == pytest.approx((2 / 3 + 0) / 2)


def test_errors():
    with pytest.raises(ValueError):
        macro_f1([0, 1], [0], 2)
    with pytest.raises(ValueError):
        macro_f1([], [], 2)
    with pytest.raises(ValueError):
        macro_f1([0, 3], [0, 1], 2)


def test_matches_oracle_on_1000_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        k = int(rng.integers(1, 7))
        n = int(rng.integers(1, 40))
        preds = rng.integers(0, k, n)
        labels = rng.integers(0, k, n)
        assert macro_f1(preds, labels, k)[0] == brute_force_macro_f1(preds, labels, k)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6).flatmap(lambda k: st.tuples(
    st.just(k), st.lists(st.tuples(st.integers(0, k - 1), st.integers(0, k - 1)),
                         min_size=1, max_size=60))))
def test_report_invariants(case):
    k, pairs = case
    preds, labels = map(np.array, zip(*pairs))
    rep = classification_report(preds, labels, k)
    assert np.array_equal(rep.confusion.sum(axis=1), np.bincount(labels, minlength=k))
    assert rep.accuracy == np.trace(rep.confusion) / len(labels)
    assert rep.macro_f1 == pytest.approx(np.mean([rep.per_class_f1[c]
                                                  for c in rep.included_classes]), abs=1e-15)
    assert rep.macro_f1 == brute_force_macro_f1(preds, labels, k)
    assert rep.sample_count == len(labels)


def test_confusion_orientation():
    cm = confusion_matrix([1, 1, 0], [0, 1, 0], 2)
    assert cm.tolist() == [[1, 1], [0, 1]]
