import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtelab import metrics as M

# confidences 0.9 (correct), 0.8 (wrong), 0.4 (correct), 0.3 (wrong)
ECE_FIXTURE_P = np.array([
    [0.9, 0.05, 0.03, 0.02],
    [0.8, 0.1, 0.05, 0.05],
    [0.4, 0.3, 0.2, 0.1],
    [0.3, 0.25, 0.25, 0.2],
])
ECE_FIXTURE_Y = np.array([0, 1, 0, 3])


def _random_preds(rng, n, k):
    logits = rng.normal(scale=2.0, size=(n, k))
    p = np.exp(logits - logits.max(1, keepdims=True))
    return p / p.sum(1, keepdims=True), rng.integers(0, k, n)


def test_ece_fixture_is_exact():
    value, stats = M.ece(ECE_FIXTURE_P, ECE_FIXTURE_Y, 2)
    assert value == 0.25
    assert stats.counts.tolist() == [2, 2]


def test_ece_zero_for_confident_correct():
    p = np.eye(3)[[0, 1, 2, 1]]
    assert M.ece(p, [0, 1, 2, 1])[0] == 0.0
    assert M.classwise_ece(p, [0, 1, 2, 1])[0] == 0.0


def test_ece_permutation_invariant_and_bounded():
    rng = np.random.default_rng(1)
    p, y = _random_preds(rng, 300, 5)
    perm = rng.permutation(300)
    for fn in (M.ece, M.classwise_ece):
        a, b = fn(p, y)[0], fn(p[perm], y[perm])[0]
        assert a == b
        assert 0.0 <= a <= 1.0


def test_single_bin_ece_is_accuracy_minus_confidence():
    rng = np.random.default_rng(2)
    p, y = _random_preds(rng, 500, 4)
    acc = np.mean(p.argmax(1) == y)
    assert M.ece(p, y, 1)[0] == pytest.approx(abs(acc - p.max(1).mean()), abs=1e-15)


def test_bin_boundaries():
    assert M.bin_index(np.array([0.0, 0.5, 0.5000001, 1.0]), 2).tolist() == [0, 0, 1, 1]
    assert M.bin_index(np.array([1 / 15, 2 / 15 + 1e-12]), 15).tolist() == [0, 2]


def _classwise_bruteforce(p, y, m):
    n, k = p.shape
    total = 0.0
    for c in range(k):
        for i in range(m):
            lo, hi = i / m, (i + 1) / m
            members = [r for r in range(n) if (lo < p[r, c] <= hi) or (i == 0 and p[r, c] == 0)]
            if not members:
                continue
            a = sum(y[r] == c for r in members) / len(members)
            conf = sum(p[r, c] for r in members) / len(members)
            total += len(members) / (n * k) * abs(a - conf)
    return total


def test_classwise_fixture_matches_bruteforce():
    p = np.array([[0.9, 0.1], [0.7, 0.3], [0.6, 0.4], [0.2, 0.8], [0.45, 0.55], [0.1, 0.9]])
    y = np.array([0, 1, 0, 1, 0, 1])
    # class 0, bin (0.5,1]: {0.9,0.7,0.6} acc 2/3 conf 0.7333; bin [0,0.5]: {0.2,0.45,0.1} acc 1/3 conf 0.25
    hand = 2 * (3 / 12 * abs(2 / 3 - 2.2 / 3) + 3 / 12 * abs(1 / 3 - 0.75 / 3))
    value, stats = M.classwise_ece(p, y, 2)
    assert value == pytest.approx(hand, abs=1e-15)
    assert value == pytest.approx(_classwise_bruteforce(p, y, 2), abs=1e-15)
    assert stats.counts.sum() == 12


def test_classwise_random_matches_bruteforce():
    rng = np.random.default_rng(3)
    p, y = _random_preds(rng, 60, 3)
    assert M.classwise_ece(p, y, 7)[0] == pytest.approx(_classwise_bruteforce(p, y, 7), abs=1e-14)


def test_classwise_single_class():
    assert M.classwise_ece(np.ones((4, 1)), [0, 0, 0, 0])[0] == 0.0


def test_reliability_diagram_consistency():
    rng = np.random.default_rng(4)
    p, y = _random_preds(rng, 1000, 10)
    stats = M.reliability_diagram(p, y, 15)
    assert stats.counts.sum() == 1000 == stats.n
    assert M.ece_from_bins(stats) == M.ece(p, y, 15)[0]
    rows = stats.rows()
    assert len(rows) == 15 and sum(r["count"] for r in rows) == 1000
    # the float fallback agrees with the exact sum to rounding
    plain = M.BinStats(stats.counts, stats.accuracy, stats.confidence)
    assert M.ece_from_bins(plain) == pytest.approx(M.ece_from_bins(stats), abs=1e-14)


def test_reliability_perfectly_calibrated_bins():
    # two samples at 0.75 confidence, one right one wrong... then A=0.5 != C; use 0.5 instead
    p = np.array([[0.5, 0.5], [0.5, 0.5], [1.0, 0.0]])
    y = np.array([0, 1, 0])
    stats = M.reliability_diagram(p, y, 4)
    assert np.all(stats.gap == 0.0)


def test_calibration_rejects_empty_and_bad_bins():
    with pytest.raises(ValueError):
        M.ece(np.zeros((0, 2)), np.zeros(0, dtype=int))
    with pytest.raises(M.MetricError):
        M.ece(ECE_FIXTURE_P, ECE_FIXTURE_Y, 0)
    with pytest.raises(M.MetricError):
        M.ece(ECE_FIXTURE_P, ECE_FIXTURE_Y[:3])


def test_confidence_histogram():
    h = M.confidence_histogram(np.eye(3)[[0, 2, 1]], 15)
    assert h.mean_confidence == 1.0
    assert h.accuracy is None
    assert M.confidence_histogram(np.full((5, 4), 0.25)).mean_confidence == 0.25
    h = M.confidence_histogram(ECE_FIXTURE_P, 5, labels=ECE_FIXTURE_Y)
    # confidences 0.9, 0.8 -> bin 4 and 3; 0.4 -> bin 1; 0.3 -> bin 1
    assert h.counts.tolist() == [0, 2, 0, 1, 1]
    assert h.accuracy == 0.5
    assert [r["count"] for r in h.rows()] == h.counts.tolist()


def test_accuracy():
    assert M.accuracy(ECE_FIXTURE_P, ECE_FIXTURE_Y) == 0.5


def test_detection_separable():
    r = M.detection_metrics([1.0, 1.0, 1.0], [0.0, 0.0])
    assert (r.fpr95, r.d_error, r.auroc, r.aupr) == (0.0, 0.025, 1.0, 1.0)


def test_detection_identical_multisets():
    r = M.detection_metrics([0.3, 0.5, 0.5, 0.9], [0.9, 0.5, 0.3, 0.5])
    assert r.auroc == 0.5
    assert M.auroc_bruteforce([0.4], [0.4]) == 0.5


def test_detection_pairwise_example():
    assert M.detection_metrics([0.8, 0.4], [0.6, 0.2]).auroc == pytest.approx(0.75, abs=1e-15)
    assert M.auroc_bruteforce([0.8, 0.4], [0.6, 0.2]) == 0.75


def test_fpr95_reads_first_point_reaching_target():
    pos = np.arange(20) / 20.0 + 0.5  # 0.5 .. 1.45
    neg = np.array([0.55, 0.2, 0.1, 0.0])
    # TPR reaches 19/20 = 0.95 at threshold 0.55, where exactly one negative is included
    r = M.detection_metrics(pos, neg)
    assert r.fpr95 == 0.25
    assert r.d_error == pytest.approx(0.025 + 0.125)


def test_aupr_stepwise():
    # ranking: p(0.9) n(0.8) p(0.7) -> precision 1 at R=.5, 2/3 at R=1
    assert M.detection_metrics([0.9, 0.7], [0.8]).aupr == pytest.approx(0.5 + 0.5 * 2 / 3)


def test_trapezoid_auroc_matches_pairwise_with_ties():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(200):
        n_pos, n_neg = rng.integers(1, 60, size=2)
        levels = int(rng.integers(2, 12))
        pos = rng.integers(0, levels, n_pos) / levels
        neg = rng.integers(0, levels, n_neg) / levels + rng.normal(scale=0.1) * (rng.random() < 0.5)
        worst = max(worst, abs(M.detection_metrics(pos, neg).auroc - M.auroc_bruteforce(pos, neg)))
    assert worst <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_detection_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    pos, neg = rng.normal(1.0, size=50), rng.normal(size=40)
    a = M.detection_metrics(pos, neg)
    b = M.detection_metrics(np.exp(3 * pos) + 1, np.exp(3 * neg) + 1)
    assert a.auroc == pytest.approx(b.auroc, abs=1e-15)
    assert a.fpr95 == b.fpr95


def test_detection_rejects_empty():
    with pytest.raises(M.MetricError):
        M.detection_metrics([], [0.1])
    with pytest.raises(M.MetricError):
        M.auroc_bruteforce([0.1], [])


def test_misclassification_scores_split():
    correct, wrong = M.misclassification_scores(ECE_FIXTURE_P, ECE_FIXTURE_Y)
    assert correct.tolist() == [0.9, 0.4]
    assert wrong.tolist() == [0.8, 0.3]
