import csv
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vitalnet import metrics as M


def brute_auc(scores, labels, k):
    pos = [s for s, y in zip(scores, labels) if y == k]
    neg = [s for s, y in zip(scores, labels) if y != k]
    wins = Fraction(0)
    for p in pos:
        for n in neg:
            wins += 1 if p > n else Fraction(1, 2) if p == n else 0
    return wins / (len(pos) * len(neg))


# ---- accuracy / confusion ------------------------------------------------------

def test_accuracy_examples():
    assert M.accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert M.accuracy([1, 2, 0], [0, 1, 2]) == 0.0
    assert M.accuracy([0, 1, 2, 3], [0, 1, 2, 4]) == 0.75
    with pytest.raises(ValueError):
        M.accuracy([], [])


def test_confusion_perfect_is_diagonal():
    labels = [0, 1, 2, 3, 4, 5, 5]
    cm = M.confusion(labels, labels)
    assert np.array_equal(cm.counts, np.diag([1, 1, 1, 1, 1, 2]))


def test_confusion_single_cell():
    cm = M.confusion([5], [2])
    assert cm.counts[2, 5] == 1 and cm.total == 1


def test_confusion_hand_count():
    labels = [0, 0, 1, 1, 2, 2]
    preds = [0, 1, 1, 1, 2, 0]
    cm = M.confusion(preds, labels)
    expected = np.zeros((6, 6), dtype=int)
    expected[0, 0] = 1
    expected[0, 1] = 1
    expected[1, 1] = 2
    expected[2, 2] = 1
    expected[2, 0] = 1
    assert np.array_equal(cm.counts, expected)
    norm = cm.row_normalize()
    assert norm[0].tolist()[:2] == [0.5, 0.5]
    assert cm.empty_rows == [3, 4, 5]
    assert not norm[3].any()


def test_confusion_out_of_range():
    with pytest.raises(ValueError):
        M.confusion([6], [0])


# ---- sen / spe -----------------------------------------------------------------

def test_sen_spe_perfect():
    labels = [0, 1, 2, 3, 4, 5]
    cm = M.confusion(labels, labels)
    for k in range(6):
        assert M.sen_spe(cm, k) == (1.0, 1.0)


def test_sen_spe_absent_class_undefined():
    cm = M.confusion([0, 1], [0, 1])
    sen, spe = M.sen_spe(cm, 4)
    assert sen is None and spe == 1.0


def test_sen_spe_hand_count():
    cm = M.confusion([0, 1, 1, 1, 2, 0], [0, 0, 1, 1, 2, 2])
    # class 0: TP 1, FN 1, FP 1 (true 2 -> 0), TN 3
    assert M.sen_spe(cm, 0) == (0.5, 0.75)


# ---- AUC / ROC -----------------------------------------------------------------

def test_auc_examples():
    assert M.auc_ovr([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0], 1) == 1.0
    assert M.auc_ovr([0.5] * 4, [1, 0, 1, 0], 1) == 0.5
    assert M.auc_ovr([0.6, 0.7, 0.8, 0.2], [1, 0, 1, 0], 1) == 0.75
    assert brute_auc([0.6, 0.7, 0.8, 0.2], [1, 0, 1, 0], 1) == Fraction(3, 4)


def test_auc_single_class_undefined():
    assert M.auc_ovr([0.1, 0.2], [3, 3], 3) is None
    assert M.roc_points([0.1, 0.2], [3, 3], 3) is None


def test_roc_examples():
    assert M.roc_points([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0], 1) == [(0, 0), (0, 0.5), (0, 1), (0.5, 1), (1, 1)]
    assert M.roc_points([0.5] * 4, [1, 0, 1, 0], 1) == [(0, 0), (1, 1)]


def test_roc_perfect_compressed_corners():
    # two distinct scores only -> the canonical three-point perfect curve
    assert M.roc_points([0.9, 0.9, 0.1, 0.1], [1, 1, 0, 0], 1) == [(0, 0), (0, 1), (1, 1)]


def random_instance(rng, n_max=50, k=2):
    n = int(rng.integers(2, n_max + 1))
    labels = rng.integers(0, 3, n)
    labels[0], labels[1] = k, (k + 1) % 3
    scores = np.round(rng.uniform(0, 1, n), int(rng.integers(1, 3)))  # rounding creates ties
    return scores, labels


def test_auc_matches_bruteforce_1000():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        scores, labels = random_instance(rng)
        assert M.auc_ovr(scores, labels, 2) == float(brute_auc(scores, labels, 2))


def test_roc_area_matches_auc_1000():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        scores, labels = random_instance(rng)
        pts = M.roc_points(scores, labels, 2)
        assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
        xs, ys = zip(*pts)
        assert all(a <= b for a, b in zip(xs, xs[1:])) and all(a <= b for a, b in zip(ys, ys[1:]))
        assert abs(M.trapezoid_area(pts) - M.auc_ovr(scores, labels, 2)) < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6))
def test_auc_monotone_transform_and_negation(seed):
    rng = np.random.default_rng(seed)
    scores, labels = random_instance(rng, n_max=30)
    a = M.auc_ovr(scores, labels, 2)
    assert M.auc_ovr(np.exp(3 * scores) + 1, labels, 2) == a
    assert a + M.auc_ovr(-scores, labels, 2) == 1.0


# ---- report --------------------------------------------------------------------

def test_evaluate_report_fractions(tmp_path):
    rng = np.random.default_rng(2)
    probs = rng.dirichlet(np.ones(6), size=40)
    labels = rng.integers(0, 6, 40)
    rep = M.evaluate(probs, labels)
    doc = rep.to_json()
    vals = [doc["accuracy"], doc["macro_auc"]]
    for v in doc["per_class"].values():
        vals += [x for x in v.values() if x is not None]
    assert all(0 <= x <= 1 for x in vals)
    for row in doc["confusion_normalized"]:
        if any(row):
            assert abs(sum(row) - 1) < 1e-9
    rep.write_roc_csv(tmp_path / "roc.csv")
    rows = list(csv.DictReader(open(tmp_path / "roc.csv")))
    assert set(rows[0]) == {"class", "threshold", "fpr", "tpr"}
    assert rows[0]["threshold"] == "inf"


def test_macro_auc_skips_undefined():
    probs = np.full((4, 6), 1 / 6)
    probs[:, 0] = [0.9, 0.8, 0.1, 0.2]
    rep = M.evaluate(probs, [0, 0, 1, 1])
    assert rep.auc[2] is None
    assert rep.macro_auc == pytest.approx((1.0 + 0.5) / 2)
