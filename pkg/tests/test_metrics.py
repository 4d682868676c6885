"""
Tests for evaluation metrics
============================

Confusion-matrix statistics and one-vs-rest AUC against an exhaustive
pairwise-comparison oracle.
"""

import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colora.metrics import (
    ConfusionMatrix,
    classwise,
    confusion,
    evaluate_scores,
    f1_score,
    predict_labels,
    roc_auc_ovr,
)


def pairwise_auc(scores, positive):
    """Mann-Whitney oracle: P(s+ > s-) + 0.5 P(s+ == s-) over all pairs."""
    pos = [s for s, y in zip(scores, positive) if y]
    neg = [s for s, y in zip(scores, positive) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


# =============================================================================
# Confusion
# =============================================================================

def test_confusion_hand_count():
    cm = confusion([0, 0, 1, 1], [0, 1, 1, 1], 2)
    np.testing.assert_array_equal(cm.counts, [[1, 1], [0, 2]])
    assert cm.total == 4


def test_confusion_diagonal_and_empty():
    cm = confusion([0, 2, 1, 2], [0, 2, 1, 2], 3)
    np.testing.assert_array_equal(cm.counts, np.diag([1, 1, 2]))
    assert not confusion([], [], 3).counts.any()


def test_confusion_errors():
    with pytest.raises(ValueError, match="length"):
        confusion([0, 1], [0], 2)
    with pytest.raises(ValueError, match="outside"):
        confusion([0, 2], [0, 1], 2)
    with pytest.raises(ValueError):
        ConfusionMatrix([[1, 2, 3]])
    with pytest.raises(ValueError):
        ConfusionMatrix([[1, -1], [0, 0]])


def test_confusion_csv():
    csv = confusion([0, 1], [1, 1], 2).to_csv()
    assert csv == "true\\pred,0,1\n0,0,1\n1,0,1\n"


# =============================================================================
# Class-wise
# =============================================================================

def test_classwise_identity():
    rep = classwise(ConfusionMatrix(np.eye(4, dtype=int) * 5))
    for arr in (rep.recall, rep.precision, rep.specificity, rep.f1):
        np.testing.assert_array_equal(arr, 1.0)
    assert rep.accuracy == 1.0


def test_classwise_hand_example():
    rep = classwise(ConfusionMatrix([[1, 1], [0, 2]]))
    np.testing.assert_allclose(rep.recall, [0.5, 1.0])
    np.testing.assert_allclose(rep.precision, [1.0, 2 / 3])
    assert rep.accuracy == 0.75
    # specificity of class 0 is recall of class 1 in the binary case
    np.testing.assert_allclose(rep.specificity, [1.0, 0.5])
    assert rep.macro["recall"] == pytest.approx(0.75)


def test_specificity_by_definition():
    c = np.array([[5, 1, 0], [2, 7, 1], [0, 3, 4]])
    rep = classwise(ConfusionMatrix(c))
    for i in range(3):
        rest = [p for p in range(3) if p != i]
        num = sum(c[p, q] for p in rest for q in rest)
        den = sum(c[p, q] for p in rest for q in range(3))
        assert rep.specificity[i] == pytest.approx(num / den)


def test_f1_table_value():
    assert round(f1_score(0.927, 0.972), 3) == 0.949


def test_f1_edge_cases():
    assert f1_score(0.0, 0.0) == 0.0
    assert np.isnan(f1_score(np.nan, 0.5))


@pytest.mark.filterwarnings("ignore:.*undefined f1")
def test_zero_support_excluded_with_warning():
    with pytest.warns(RuntimeWarning, match="recall"):
        rep = classwise(ConfusionMatrix([[2, 0, 0], [0, 1, 1], [0, 0, 0]]))
    assert np.isnan(rep.recall[2])
    assert rep.macro["recall"] == pytest.approx(0.75)


def test_report_csv_shape():
    rep = classwise(ConfusionMatrix([[3, 1], [1, 3]]))
    lines = rep.to_csv(auc=[0.9, 0.9]).splitlines()
    assert lines[0] == "class,recall,precision,specificity,f1,auc"
    assert lines[-2].startswith("macro,") and lines[-1].startswith("accuracy,0.750000")
    assert all(len(ln.split(",")) == 6 for ln in lines)
    assert all(len(ln.split(",")) == 5 for ln in rep.to_csv().splitlines())


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60),
       st.permutations(range(4)))
def test_property_relabel_symmetry(pairs, perm):
    true, pred = map(np.array, zip(*pairs))
    perm = np.array(perm)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a = classwise(confusion(true, pred, 4))
        b = classwise(confusion(perm[true], perm[pred], 4))
    assert a.accuracy == b.accuracy
    np.testing.assert_array_equal(b.recall[perm], a.recall)
    np.testing.assert_array_equal(b.f1[perm], a.f1)
    finite = a.f1[~np.isnan(a.f1)]
    if finite.size:
        assert finite.min() - 1e-12 <= a.macro["f1"] <= finite.max() + 1e-12


# =============================================================================
# ROC
# =============================================================================

def test_auc_examples():
    assert roc_auc_ovr(np.array([0.1, 0.2, 0.8, 0.9]), [0, 0, 1, 1], 1).auc == 1.0
    assert roc_auc_ovr(np.full(6, 0.3), [0, 1, 0, 1, 1, 0], 1).auc == 0.5
    assert roc_auc_ovr(np.array([0.1, 0.4, 0.35, 0.8]), [0, 0, 1, 1], 1).auc == 0.75


def test_roc_curve_shape():
    roc = roc_auc_ovr(np.array([0.1, 0.4, 0.35, 0.8, 0.4]), [0, 0, 1, 1, 1], 1)
    assert (roc.fpr[0], roc.tpr[0]) == (0.0, 0.0)
    assert (roc.fpr[-1], roc.tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)
    assert roc.to_csv().splitlines()[0] == "threshold,fpr,tpr"


def test_roc_uses_class_column():
    scores = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
    assert roc_auc_ovr(scores, [0, 1, 0], 0).auc == 1.0
    assert roc_auc_ovr(scores, [0, 1, 0], 1).auc == 1.0


def test_roc_degenerate():
    with pytest.raises(ValueError, match="undefined"):
        roc_auc_ovr(np.array([0.1, 0.2]), [1, 1], 1)
    with pytest.raises(ValueError):
        roc_auc_ovr(np.array([]), [], 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=40)
       .filter(lambda v: 0 < sum(y for _, y in v) < len(v)))
def test_property_auc_equals_pairwise(data):
    scores = np.array([s / 6 for s, _ in data])
    labels = np.array([int(y) for _, y in data])
    assert abs(roc_auc_ovr(scores, labels, 1).auc - pairwise_auc(scores, labels == 1)) <= 1e-12


def test_specificity_matches_roc_operating_point():
    # binary argmax at p1 > 0.5 is the same as thresholding column 1 at 0.5
    rng = np.random.default_rng(0)
    p1 = rng.random(40)
    scores = np.c_[1 - p1, p1]
    true = (rng.random(40) < p1).astype(int)
    rep = evaluate_scores(scores, true)
    roc = rep.rocs[1]
    th = scores[:, 1][predict_labels(scores) == 1].min()
    k = int(np.flatnonzero(roc.thresholds == th)[0])
    assert rep.classes.specificity[1] == pytest.approx(1 - roc.fpr[k])


# =============================================================================
# Combined
# =============================================================================

def test_predict_labels_tie_goes_low():
    np.testing.assert_array_equal(predict_labels([[0.5, 0.5], [0.2, 0.8]]), [0, 1])


def test_evaluate_scores_perfect():
    true = np.array([0, 1, 2, 3] * 3)
    scores = np.eye(4)[true] * 0.7 + 0.075
    rep = evaluate_scores(scores, true)
    assert rep.accuracy == 1.0 and rep.macro_auc == 1.0
    np.testing.assert_array_equal(rep.aucs, 1.0)


def test_evaluate_scores_absent_class_auc_nan():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rep = evaluate_scores(np.array([[0.6, 0.3, 0.1], [0.2, 0.7, 0.1]]), [0, 1], 3)
    assert np.isnan(rep.aucs[2]) and rep.rocs[2] is None
    assert rep.macro_auc == 1.0
