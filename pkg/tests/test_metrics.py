import numpy as np
import pytest

from voxelgen.evalsuite import MetricError, auc, binary_auc, precision


def auc_counting_oracle(scores, labels):
    # brute-force pair counting with half-credit for ties
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestBinaryAuc:
    def test_perfect_separation(self):
        assert binary_auc(np.array([0.9, 0.8, 0.2, 0.1]),
                          np.array([1, 1, 0, 0])) == 1.0

    def test_perfect_inversion(self):
        assert binary_auc(np.array([0.1, 0.2, 0.8, 0.9]),
                          np.array([1, 1, 0, 0])) == 0.0

    def test_all_tied_is_half(self):
        assert binary_auc(np.full(6, 0.5),
                          np.array([1, 0, 1, 0, 1, 0])) == 0.5

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(2, 50))
            labels = rng.integers(0, 2, n)
            if labels.sum() in (0, n):
                continue
            # quantize so ties actually occur
            scores = np.round(rng.random(n), 1)
            assert binary_auc(scores, labels) == pytest.approx(
                auc_counting_oracle(scores, labels), abs=1e-12)

    def test_degenerate_labels_rejected(self):
        with pytest.raises(MetricError):
            binary_auc(np.array([0.1, 0.2]), np.array([1, 1]))


class TestMultiLabelAuc:
    def test_macro_mean_of_per_class(self):
        scores = np.array([[0.9, 0.1], [0.8, 0.9], [0.1, 0.2], [0.2, 0.8]])
        labels = np.array([[1, 0], [1, 1], [0, 0], [0, 1]])
        per = [binary_auc(scores[:, k], labels[:, k]) for k in range(2)]
        value, skipped = auc(scores, labels, mode="macro")
        assert value == pytest.approx(np.mean(per)) and skipped == []

    def test_weighted_uses_positive_counts(self):
        rng = np.random.default_rng(1)
        scores = rng.random((20, 3))
        labels = rng.integers(0, 2, (20, 3))
        per, w = [], []
        for k in range(3):
            per.append(binary_auc(scores[:, k], labels[:, k]))
            w.append(labels[:, k].sum())
        value, _ = auc(scores, labels, mode="weighted")
        assert value == pytest.approx(np.average(per, weights=w))

    def test_degenerate_class_skipped(self):
        scores = np.array([[0.9, 0.1], [0.2, 0.9]])
        labels = np.array([[1, 1], [0, 1]])
        value, skipped = auc(scores, labels)
        assert skipped == [1]
        assert value == pytest.approx(1.0)

    def test_all_degenerate_raises(self):
        with pytest.raises(MetricError):
            auc(np.ones((3, 2)) * 0.5, np.ones((3, 2), dtype=int))

    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            auc(np.ones((3, 2)), np.ones((3, 3), dtype=int))

    def test_unknown_mode(self):
        scores = np.array([[0.9], [0.1]])
        labels = np.array([[1], [0]])
        with pytest.raises(MetricError):
            auc(scores, labels, mode="median")


def precision_counting_oracle(scores, labels, threshold):
    values, weights = [], []
    for k in range(scores.shape[1]):
        col = labels[:, k]
        if col.sum() in (0, len(col)):
            continue
        tp = fp = 0
        for i in range(len(col)):
            if scores[i, k] > threshold:
                if col[i] == 1:
                    tp += 1
                else:
                    fp += 1
        values.append(tp / (tp + fp) if tp + fp else 0.0)
        weights.append(col.sum())
    return values, weights


class TestPrecision:
    def test_simple_counts(self):
        scores = np.array([[0.9], [0.8], [0.7], [0.1]])
        labels = np.array([[1], [0], [1], [0]])
        value, skipped = precision(scores, labels)
        assert value == pytest.approx(2 / 3) and skipped == []

    def test_no_predictions_scores_zero(self):
        scores = np.array([[0.1], [0.2]])
        labels = np.array([[1], [0]])
        value, _ = precision(scores, labels)
        assert value == 0.0

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n, k = int(rng.integers(2, 40)), int(rng.integers(1, 5))
            scores = rng.random((n, k))
            labels = rng.integers(0, 2, (n, k))
            oracle, weights = precision_counting_oracle(scores, labels, 0.5)
            if not oracle:
                continue
            macro, _ = precision(scores, labels, mode="macro")
            weighted, _ = precision(scores, labels, mode="weighted")
            assert macro == pytest.approx(np.mean(oracle), abs=1e-12)
            assert weighted == pytest.approx(
                np.average(oracle, weights=weights), abs=1e-12)

    def test_threshold_strictly_greater(self):
        scores = np.array([[0.5], [0.6]])
        labels = np.array([[1], [0]])
        # 0.5 is not > 0.5, so only the negative is predicted positive
        value, _ = precision(scores, labels, threshold=0.5)
        assert value == 0.0
