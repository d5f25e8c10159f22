from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from curricuids.errors import LengthMismatch
from curricuids.metrics import MetricsReport, compute_metrics, metrics_from_counts


def hand_count(probs, labels, thr):
    tp = fp = fn = tn = 0
    for p, y in zip(probs, labels):
        pos = p >= thr
        if pos and y == 1:
            tp += 1
        elif pos:
            fp += 1
        elif y == 1:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def exact_ratios(tp, fp, fn, tn):
    prec = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    rec = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else Fraction(0)
    return prec, rec, f1, Fraction(tp + tn, tp + fp + fn + tn)


def test_perfect_predictions():
    r = compute_metrics([0.9, 0.1, 0.7], [1, 0, 1])
    assert (r.precision, r.recall, r.f1, r.accuracy) == (1.0, 1.0, 1.0, 1.0)


def test_hand_confusion_example():
    probs = [0.9, 0.8, 0.6, 0.2] + [0.1] * 6
    labels = [1, 1, 0, 1] + [0] * 6
    r = compute_metrics(probs, labels)
    assert (r.tp, r.fp, r.fn, r.tn) == (2, 1, 1, 6)
    assert r.precision == pytest.approx(2 / 3, abs=1e-15)
    assert r.recall == pytest.approx(2 / 3, abs=1e-15)
    assert r.f1 == pytest.approx(2 / 3, abs=1e-15)
    assert r.accuracy == 0.8


def test_all_negative_flags_precision():
    r = compute_metrics([0.1, 0.2, 0.3, 0.4], [1, 0, 0, 1])
    assert r.precision == 0.0 and r.precision_undefined
    assert r.recall == 0.0 and not r.recall_undefined
    assert r.accuracy == r.tn / r.n == 0.5
    assert r.f1 == 0.0


def test_threshold_zero_recalls_everything():
    assert compute_metrics([0.0, 0.3, 0.01], [1, 0, 1], threshold=0.0).recall == 1.0


def test_errors():
    with pytest.raises(LengthMismatch):
        compute_metrics([0.1, 0.2], [1])
    with pytest.raises(ValueError):
        compute_metrics([0.1, 0.2], [1, 2])


def test_twenty_random_cases_against_hand_count():
    rng = np.random.default_rng(20)
    for case in range(20):
        n = int(rng.integers(1, 30))
        probs = np.round(rng.random(n), 2)
        labels = rng.integers(0, 2, n)
        thr = float(rng.choice([0.25, 0.5, 0.75]))
        counts = hand_count(probs, labels, thr)
        r = compute_metrics(probs, labels, thr)
        assert (r.tp, r.fp, r.fn, r.tn) == counts, case
        for got, want in zip((r.precision, r.recall, r.f1, r.accuracy), exact_ratios(*counts)):
            assert abs(got - float(want)) <= 1e-12, case


@given(st.integers(0, 40), st.integers(0, 40), st.integers(0, 40), st.integers(0, 40))
def test_counts_reconstruct(tp, fp, fn, tn):
    r = metrics_from_counts(tp, fp, fn, tn)
    assert r.n == tp + fp + fn + tn
    if tp + fp:
        assert round(r.precision * (tp + fp)) == tp
    if tp + fn:
        assert round(r.recall * (tp + fn)) == tp
    for v in (r.precision, r.recall, r.f1, r.accuracy):
        assert 0.0 <= v <= 1.0
    if r.precision + r.recall:
        assert r.f1 == pytest.approx(2 * r.precision * r.recall / (r.precision + r.recall))


def test_report_round_trip_and_summary():
    r = metrics_from_counts(2, 1, 1, 6)
    assert MetricsReport.from_dict(r.to_dict()) == r
    assert r.summary().startswith("accuracy 80.00%  precision 66.67%")
