import numpy as np
import pytest

from mpcnet.loss import predict
from mpcnet.metrics import ConfusionMatrix, accumulate, average_scores, compute_report
from mpcnet.pointcloud import UNLABELED


def oracle(counts, tail):
    """Straight-line metric definitions over a confusion matrix."""
    L = len(counts)
    total = 0
    diag = 0
    rows = [0] * L
    cols = [0] * L
    for i in range(L):
        for j in range(L):
            total += counts[i][j]
            rows[i] += counts[i][j]
            cols[j] += counts[i][j]
        diag += counts[i][i]
    acc, iou = {}, {}
    for c in range(L):
        if rows[c] > 0:
            acc[c] = counts[c][c] / rows[c]
            iou[c] = counts[c][c] / (rows[c] + cols[c] - counts[c][c])
    oa = diag / total
    pe = 0.0
    for c in range(L):
        pe += (rows[c] / total) * (cols[c] / total)
    kappa = (oa - pe) / (1 - pe)
    head = [acc[c] for c in acc if c not in tail]
    tl = [acc[c] for c in acc if c in tail]
    return {
        "oa": oa, "aa": sum(acc.values()) / len(acc), "kappa": kappa,
        "miou": sum(iou.values()) / len(iou),
        "head_avg": sum(head) / len(head), "head_min": min(head),
        "tail_avg": sum(tl) / len(tl), "tail_min": min(tl),
    }


def test_random_matrices_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        counts = rng.integers(0, 50, size=(5, 5))
        counts[np.arange(5), np.arange(5)] += 1
        tail = {3, 4}
        rep = compute_report(ConfusionMatrix(counts), tail)
        want = oracle(counts.tolist(), tail)
        for key, val in want.items():
            assert abs(getattr(rep, key) - val) <= 1e-12, key


def test_perfect_prediction_all_one():
    cm = accumulate(ConfusionMatrix.zeros(3), [0, 1, 2, 2, 1], [0, 1, 2, 2, 1])
    np.testing.assert_array_equal(cm.counts, np.diag([1, 2, 2]))
    rep = compute_report(cm, {2})
    for key in ("oa", "aa", "kappa", "miou", "head_avg", "tail_avg", "head_min", "tail_min"):
        assert getattr(rep, key) == 1.0


def test_chance_level_kappa_zero():
    truths = [0] * 50 + [1] * 50
    rep = compute_report(accumulate(ConfusionMatrix.zeros(2), truths, [0] * 100))
    assert rep.oa == 0.5
    assert rep.kappa == 0.0


def test_single_error_and_masks():
    cm = accumulate(ConfusionMatrix.zeros(2), [0], [1])
    assert cm.counts[0, 1] == 1 and cm.total == 1
    cm = accumulate(ConfusionMatrix.zeros(2), [0, UNLABELED, 1, 1], [0, 0, 1, 0],
                    eval_mask=[True, True, False, True])
    np.testing.assert_array_equal(cm.counts, [[1, 0], [1, 0]])


def test_absent_classes_flagged_and_empty_rejected():
    rep = compute_report(ConfusionMatrix(np.array([[3, 1, 0], [0, 0, 0], [0, 1, 2]])))
    assert rep.absent_classes == [1]
    assert rep.aa == pytest.approx((0.75 + 2 / 3) / 2)
    with pytest.raises(ValueError):
        compute_report(ConfusionMatrix.zeros(3))


def test_class_permutation_invariance():
    rng = np.random.default_rng(1)
    for _ in range(20):
        counts = rng.integers(1, 30, size=(4, 4))
        perm = rng.permutation(4)
        a = compute_report(ConfusionMatrix(counts))
        b = compute_report(ConfusionMatrix(counts[np.ix_(perm, perm)]))
        for key in ("oa", "aa", "kappa", "miou"):
            assert getattr(a, key) == pytest.approx(getattr(b, key), abs=1e-12)
        np.testing.assert_allclose(np.array(a.per_class_acc)[perm], b.per_class_acc)


def test_metric_ranges():
    rng = np.random.default_rng(2)
    for _ in range(50):
        rep = compute_report(ConfusionMatrix(rng.integers(0, 20, size=(5, 5)) + np.eye(5, dtype=int)))
        assert 0 <= rep.oa <= 1 and 0 <= rep.aa <= 1 and 0 <= rep.miou <= 1
        assert -1 <= rep.kappa <= 1


def test_merge_is_elementwise_sum():
    rng = np.random.default_rng(3)
    t, p = rng.integers(0, 3, 100), rng.integers(0, 3, 100)
    whole = accumulate(ConfusionMatrix.zeros(3), t, p)
    parts = accumulate(ConfusionMatrix.zeros(3), t[:40], p[:40]) + \
        accumulate(ConfusionMatrix.zeros(3), t[40:], p[40:])
    np.testing.assert_array_equal(whole.counts, parts.counts)


def test_duplicate_points_use_averaged_scores():
    # point 0 appears in both samples: rows [0.9, 0.1] and [0.1, 0.9] average to a tie
    scores, covered = average_scores(3, [np.array([0, 1]), np.array([0, 2])],
                                     [np.array([[0.9, 0.1], [0.2, 0.8]]),
                                      np.array([[0.1, 0.9], [0.7, 0.3]])])
    np.testing.assert_allclose(scores[0], [0.5, 0.5])
    assert covered.all()
    np.testing.assert_array_equal(predict(scores), [0, 1, 0])
    rng = np.random.default_rng(4)
    idx = [rng.integers(0, 20, 8) for _ in range(5)]
    rows = [rng.random((8, 3)) for _ in range(5)]
    scores, covered = average_scores(20, idx, rows)
    for p in range(20):
        hits = [r[j] for i, r in zip(idx, rows) for j in range(8) if i[j] == p]
        if hits:
            np.testing.assert_allclose(scores[p], np.mean(hits, axis=0))
        else:
            assert not covered[p]


def test_report_serialisation():
    rep = compute_report(ConfusionMatrix(np.array([[5, 1], [2, 2]])), {1})
    text = rep.to_csv(["ground", "roof"])
    lines = text.strip().splitlines()
    assert lines[0] == "metric,value"
    assert lines[1].startswith("ground,") and lines[3].startswith("oa,")
    assert set(rep.summary()) == set(rep.SUMMARY)
    assert rep.to_dict()["tail_set"] == [1]
