import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import roc_curve

from vadfusion.metrics import (
    EvalReport,
    binary_metrics,
    ccc,
    regression_report,
    youden_threshold,
)


def ccc_bruteforce(pred, gold):
    """Independent CCC route: explicit loops over the population moments."""
    n = len(pred)
    mp = sum(pred) / n
    mg = sum(gold) / n
    vp = sum((x - mp) ** 2 for x in pred) / n
    vg = sum((x - mg) ** 2 for x in gold) / n
    cov = sum((x - mp) * (y - mg) for x, y in zip(pred, gold)) / n
    return 2.0 * cov / (vp + vg + (mp - mg) ** 2)


class TestCcc:
    def test_perfect_agreement(self):
        assert ccc([0.1, 0.5, 0.9], [0.1, 0.5, 0.9]) == pytest.approx(1.0)

    def test_constant_pred(self):
        assert ccc([0.5, 0.5, 0.5], [0.1, 0.5, 0.9]) == pytest.approx(0.0)

    def test_anticorrelated(self):
        assert ccc([0.0, 1.0], [1.0, 0.0]) == pytest.approx(-1.0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            ccc([1, 2], [1, 2, 3])

    def test_double_constant_warns_zero(self):
        with pytest.warns(UserWarning, match="degenerate"):
            assert ccc([0.3, 0.3], [0.3, 0.3]) == 0.0

    def test_matches_bruteforce_on_random(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            n = int(rng.integers(2, 40))
            p = rng.normal(size=n)
            g = p + rng.normal(scale=rng.uniform(0.01, 2.0), size=n)
            assert ccc(p, g) == pytest.approx(ccc_bruteforce(list(p), list(g)), abs=1e-9)

    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=30))
    @settings(max_examples=60, deadline=None)
    def test_symmetry(self, xs):
        rng = np.random.default_rng(0)
        ys = list(rng.normal(size=len(xs)))
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert ccc(xs, ys) == pytest.approx(ccc(ys, xs), abs=1e-12)

    def test_bounded_by_pearson(self):
        rng = np.random.default_rng(17)
        for _ in range(30):
            n = int(rng.integers(3, 50))
            p = rng.normal(size=n)
            g = 0.5 * p + rng.normal(size=n)
            if np.std(p) == 0 or np.std(g) == 0:
                continue
            pearson = np.corrcoef(p, g)[0, 1]
            assert abs(ccc(p, g)) <= abs(pearson) + 1e-12

    def test_value_in_range(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            p, g = rng.normal(size=10), rng.normal(size=10)
            assert -1.0 - 1e-12 <= ccc(p, g) <= 1.0 + 1e-12


class TestBinaryMetrics:
    def test_perfect_classifier(self):
        labels = [0, 1, 1, 0, 1]
        m = binary_metrics(labels, labels, 0.5)
        assert m["accuracy"] == m["f1"] == m["precision"] == m["recall"] == 1.0
        assert m["degenerate"] == []

    def test_all_negative_predictions(self):
        m = binary_metrics([0.1, 0.2, 0.3], [1, 0, 1], 0.5)
        assert m["recall"] == 0.0
        assert m["precision"] == 0.0
        assert "precision" in m["degenerate"]

    def test_confusion_example(self):
        m = binary_metrics([0.9, 0.2, 0.8, 0.1], [1, 0, 0, 1], 0.5)
        assert (m["tp"], m["fp"], m["fn"], m["tn"]) == (1, 1, 1, 1)
        assert m["accuracy"] == m["precision"] == m["recall"] == m["f1"] == 0.5

    def test_threshold_is_inclusive(self):
        m = binary_metrics([0.5], [1], 0.5)
        assert m["tp"] == 1

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            binary_metrics([0.5], [1, 0], 0.5)


class TestYoudenThreshold:
    def test_separable(self):
        scores = [0.1, 0.2, 0.25, 0.8, 0.9, 0.75]
        labels = [0, 0, 0, 1, 1, 1]
        tau = youden_threshold(scores, labels)
        assert 0.3 < tau < 0.7
        m = binary_metrics(scores, labels, tau)
        assert m["accuracy"] == 1.0

    def test_four_point_example(self):
        assert youden_threshold([0.1, 0.4, 0.6, 0.9], [0, 0, 1, 1]) == pytest.approx(0.5)

    def test_random_labels_give_small_j(self):
        rng = np.random.default_rng(99)
        scores = rng.uniform(size=1000)
        labels = rng.integers(0, 2, size=1000)
        tau = youden_threshold(scores, labels)
        pred = scores >= tau
        sens = np.sum(pred & (labels == 1)) / np.sum(labels == 1)
        spec = np.sum(~pred & (labels == 0)) / np.sum(labels == 0)
        assert abs(sens + spec - 1.0) < 0.15

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="both classes"):
            youden_threshold([0.2, 0.8], [1, 1])

    def test_ties_take_smallest_tau(self):
        # J=1 on a plateau of thresholds; candidate enumeration must return
        # the smallest maximizing candidate
        scores = [0.0, 1.0, 1.0, 0.0]
        labels = [0, 1, 1, 0]
        assert youden_threshold(scores, labels) == pytest.approx(0.5)

    def test_matches_sklearn_roc_on_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(8, 60))
            scores = rng.uniform(size=n).round(2)
            labels = (scores + rng.normal(scale=0.4, size=n) > 0.5).astype(int)
            if labels.min() == labels.max():
                continue
            tau = youden_threshold(scores, labels)
            fpr, tpr, _ = roc_curve(labels, scores)
            best_j_ref = np.max(tpr - fpr)
            pred = scores >= tau
            sens = np.sum(pred & (labels == 1)) / np.sum(labels == 1)
            spec = np.sum(~pred & (labels == 0)) / np.sum(labels == 0)
            assert sens + spec - 1.0 == pytest.approx(best_j_ref, abs=1e-12)


class TestEvalReport:
    def test_avg_equals_mean(self):
        rep = EvalReport(ccc={"v": 0.6, "a": 0.3, "d": 0.9})
        assert rep.ccc["avg"] == pytest.approx(0.6)

    def test_text_block(self):
        rep = EvalReport(ccc={"v": 0.5, "a": 0.5, "d": 0.5},
                         binary={"accuracy": 0.9, "f1": 0.8, "precision": 0.7, "recall": 0.95},
                         tau_star=0.42)
        text = rep.as_text()
        assert "ccc.avg=0.500000" in text
        assert "binary.f1=0.800000" in text
        assert "tau_star=0.420000" in text

    def test_json_roundtrip(self):
        import json
        rep = EvalReport(ccc={"v": 0.5, "a": 0.4, "d": 0.3})
        payload = json.loads(rep.as_json())
        assert payload["ccc"]["avg"] == pytest.approx(0.4)

    def test_regression_report(self):
        gold = np.random.default_rng(1).uniform(size=(50, 3))
        rep = regression_report(gold, gold)
        assert rep.ccc["avg"] == pytest.approx(1.0)
