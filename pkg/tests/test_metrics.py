import numpy as np
import pytest
from scipy.stats import mannwhitneyu

from cpdg.metrics import average_precision, evaluate, micro_f1, roc_auc


def auc_pairs(s, y):
    pos, neg = s[y == 1], s[y == 0]
    diff = pos[:, None] - neg[None, :]
    return ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size


def ap_thresholds(s, y):
    total, prev_recall = 0.0, 0.0
    for thr in sorted(set(s.tolist()), reverse=True):
        pred = s >= thr
        tp = np.sum(pred & (y == 1))
        recall = tp / np.sum(y == 1)
        total += (recall - prev_recall) * tp / pred.sum()
        prev_recall = recall
    return total


def f1_counts(s, y):
    pred = (s >= 0.5).astype(int)
    return np.mean(pred == y)


def test_four_sample_case():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert roc_auc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]) == 0.75


def test_perfect_and_inverted():
    y = np.array([0, 0, 1, 1, 1])
    s = np.array([0.1, 0.2, 0.7, 0.8, 0.9])
    assert roc_auc(s, y) == 1.0 and average_precision(s, y) == 1.0 and micro_f1(s, y) == 1.0
    assert roc_auc(-s, y) == 0.0


def test_all_tied_scores():
    y = np.array([0, 1, 0, 1])
    assert roc_auc(np.full(4, 0.3), y) == 0.5
    assert average_precision(np.full(4, 0.3), y) == 0.5


def test_random_scores_near_half():
    rng = np.random.default_rng(0)
    y = np.repeat([0, 1], 5_000)
    assert abs(roc_auc(rng.random(10_000), y) - 0.5) < 0.02


def test_monotone_transform_invariance():
    rng = np.random.default_rng(1)
    s, y = rng.normal(size=300), rng.integers(0, 2, 300)
    t = np.exp(3 * s) + 2
    assert roc_auc(s, y) == pytest.approx(roc_auc(t, y), abs=1e-15)
    assert average_precision(s, y) == pytest.approx(average_precision(t, y), abs=1e-15)


@pytest.mark.parametrize("seed", range(40))
def test_against_oracles(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 200))
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = np.round(rng.random(n), int(rng.integers(1, 4)))  # rounding creates ties
    assert roc_auc(s, y) == pytest.approx(auc_pairs(s, y), abs=1e-10)
    u = mannwhitneyu(s[y == 1], s[y == 0]).statistic
    assert roc_auc(s, y) == pytest.approx(u / ((y == 1).sum() * (y == 0).sum()), abs=1e-10)
    assert average_precision(s, y) == pytest.approx(ap_thresholds(s, y), abs=1e-10)
    assert micro_f1(s, y) == pytest.approx(f1_counts(s, y), abs=1e-10)


def test_single_class_rejected():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        average_precision([0.1, 0.2], [0, 0])


def test_evaluate_reports_all():
    out = evaluate("link-prediction", [0.9, 0.2], [1, 0])
    assert out == {"task": "link-prediction", "auc": 1.0, "ap": 1.0, "micro_f1": 1.0}
    with pytest.raises(ValueError):
        evaluate("ranking", [0.9, 0.2], [1, 0])
