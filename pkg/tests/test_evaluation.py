import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from credmix.embedding import EmbeddedData
from credmix.errors import ConfigurationError, InputError
from credmix.evaluation import (MetricsSummary, ThresholdVector, accuracy, attribution_report,
                                auc, evaluate, fit_thresholds, multi_seed_aggregate,
                                percentile_transform, render_report)
from credmix.game import ShapleyState
from credmix.model import agent_forward, init_model


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        return None
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def sweep_threshold(s, y):
    """Best midpoint by exhaustive search with exact rational J."""
    from fractions import Fraction
    u = sorted(set(s))
    pos, neg = sum(y), len(y) - sum(y)
    best, best_t = None, None
    for a, b in zip(u, u[1:]):
        t = (a + b) / 2
        tp = sum(1 for v, l in zip(s, y) if v > t and l == 1)
        fp = sum(1 for v, l in zip(s, y) if v > t and l == 0)
        j = Fraction(tp, pos) - Fraction(fp, neg)
        if best is None or j > best:
            best, best_t = j, t
    return best_t


class TestAuc:
    def test_perfect(self):
        assert auc([0.9, 0.8, 0.7, 0.1], [1, 1, 0, 0]) == 1.0

    def test_three_quarters(self):
        assert auc([0.8, 0.3, 0.5, 0.1], [1, 1, 0, 0]) == 0.75

    def test_single_class_undefined(self):
        assert auc([0.1, 0.2], [1, 1]) is None
        assert auc([0.1, 0.2], [0, 0]) is None

    def test_ties_count_half(self):
        assert auc([0.5, 0.5], [1, 0]) == 0.5

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            auc([0.1, 0.2], [1])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 60), st.booleans())
    def test_matches_pairwise(self, seed, n, coarse):
        rng = np.random.default_rng(seed)
        s = rng.integers(0, 5, n) / 4 if coarse else rng.normal(size=n)
        y = rng.integers(0, 2, n)
        assert auc(s, y) == pairwise_auc(s.tolist(), y.tolist())


class TestThresholds:
    def test_midpoint(self):
        thr = fit_thresholds(np.array([0.1, 0.2, 0.8, 0.9]), np.array([0, 0, 1, 1]))
        assert thr.thresholds[0] == pytest.approx(0.5, abs=1e-15)

    def test_all_negative(self):
        thr = fit_thresholds(np.array([0.1, 0.2, 5.0]), np.array([0, 0, 0]))
        assert thr.thresholds[0] == math.inf
        per, _ = accuracy(np.array([100.0, -3.0]), np.array([0, 0]), thr)
        assert per[0] == 1.0

    def test_all_positive(self):
        assert fit_thresholds(np.array([0.1, 0.2]), np.array([1, 1])).thresholds[0] == -math.inf

    def test_empty_column(self):
        with pytest.raises(ConfigurationError):
            fit_thresholds(np.zeros((0, 2)), np.zeros((0, 2)))

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(3, 30))
    def test_matches_sweep(self, seed, n):
        rng = np.random.default_rng(seed)
        s = rng.integers(0, 8, n) / 8.0
        y = rng.integers(0, 2, n)
        if y.min() == y.max() or len(set(s)) < 2:
            return
        got = fit_thresholds(s, y).thresholds[0]
        assert got == sweep_threshold(s.tolist(), y.tolist())

    def test_multi_class_columns_independent(self):
        s = np.array([[0.1, 3.0], [0.9, 1.0], [0.2, 2.0], [0.8, 0.0]])
        y = np.array([[0, 1], [1, 0], [0, 1], [1, 0]])
        thr = fit_thresholds(s, y)
        np.testing.assert_allclose(thr.thresholds, [0.5, 1.5])


class TestAccuracy:
    def test_perfect(self):
        thr = ThresholdVector(np.array([0.0]), [np.array([0.0])])
        assert accuracy(np.array([1.0, -1.0]), np.array([1, 0]), thr)[1] == 1.0

    def test_half(self):
        thr = ThresholdVector(np.array([0.0]), [np.array([0.0])])
        assert accuracy(np.array([1.0, 1.0]), np.array([1, 0]), thr)[1] == 0.5

    def test_literal_formula(self):
        rng = np.random.default_rng(0)
        s = rng.normal(size=(7, 3))
        y = rng.integers(0, 2, size=(7, 3))
        t = rng.normal(size=3)
        per, macro = accuracy(s, y, ThresholdVector(t, [np.sort(s[:, k]) for k in range(3)]))
        for k in range(3):
            lit = sum(1 for i in range(7) if (1 if s[i, k] > t[k] else 0) == y[i, k]) / 7
            assert per[k] == lit
        assert macro == pytest.approx(sum(per) / 3, abs=1e-15)

    def test_shape_mismatch(self):
        thr = ThresholdVector(np.zeros(2), [np.zeros(1)] * 2)
        with pytest.raises(InputError):
            accuracy(np.zeros((3, 2)), np.zeros((3, 3)), thr)


class TestPercentile:
    thr = ThresholdVector(np.zeros(1), [np.array([0.1, 0.2, 0.3, 0.4])])

    def test_counting(self):
        assert percentile_transform(0.3, 0, self.thr) == 75.0
        assert percentile_transform(0.05, 0, self.thr) == 0.0
        assert percentile_transform(0.4, 0, self.thr) == 100.0

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-1, 1), st.floats(-1, 1))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert percentile_transform(lo, 0, self.thr) <= percentile_transform(hi, 0, self.thr)

    def test_empty(self):
        with pytest.raises(ConfigurationError):
            percentile_transform(0.0, 0, ThresholdVector(np.zeros(1), [np.array([])]))


def _case(N, C, D, seed=0):
    rng = np.random.default_rng(seed)
    return EmbeddedData(["x"], rng.normal(size=(1, N, D)), rng.normal(size=(1, D)),
                        np.zeros((1, C)))


class TestAttribution:
    def _thr(self, C):
        return ThresholdVector(np.zeros(C), [np.linspace(-3, 3, 11)] * C)

    def test_shares_recomputed(self):
        m = init_model(3, 2, 4, np.random.default_rng(1), (5,), (3,))
        m.decision_logits[:] = np.random.default_rng(2).normal(size=(3, 2))
        case = _case(3, 2, 4)
        rep = attribution_report(m, case, self._thr(2), None, ["a", "b"], ["p", "q", "r"])
        h = agent_forward(m, case.partitions)[0][0]
        for k, c in enumerate(rep.classes):
            terms = [m.W[i, k] * h[i, k] for i in range(3)]
            np.testing.assert_allclose(c.shares, [t / sum(terms) for t in terms], rtol=1e-12)
            assert abs(sum(c.shares) - 1.0) < 1e-9
            assert 0.0 <= c.percentile <= 100.0 and 0.0 <= c.threshold_percentile <= 100.0
            assert c.decision == (c.logit > 0.0)

    def test_symmetric_agents_equal_shares(self):
        m = init_model(4, 2, 3, np.random.default_rng(3), (5,), (3,))
        for i in range(1, 4):
            m.agent_heads[i] = m.agent_heads[0]
        case = _case(4, 2, 3)
        case.partitions[0, 1:] = case.partitions[0, 0]
        rep = attribution_report(m, case, self._thr(2), None, ["a", "b"], list("pqrs"))
        for c in rep.classes:
            np.testing.assert_allclose(c.shares, 0.25, atol=1e-15)

    def test_zero_row_gets_zero_share(self):
        m = init_model(3, 1, 3, np.random.default_rng(4), (5,), (3,))
        m.decision_logits[1] = -2000.0     # exp underflows: W row is exactly zero
        phi = np.array([[0.6], [0.0], [0.4]])
        rep = attribution_report(m, _case(3, 1, 3), self._thr(1), ShapleyState(phi_ema=phi),
                                 ["a"], ["p", "q", "r"])
        c = rep.classes[0]
        assert c.shares[1] == 0.0 and c.phi_ema[1] == 0.0

    def test_render(self):
        m = init_model(2, 1, 3, np.random.default_rng(5), (5,), (3,))
        rep = attribution_report(m, _case(2, 1, 3), self._thr(1), None, ["Treatment"],
                                 ["imaging", "labs"])
        text = render_report(rep)
        assert "Treatment scored at" in text and "percentile; cutoff at" in text
        assert "top contributing agents:" in text

    def test_requires_one_case(self):
        m = init_model(2, 1, 3, np.random.default_rng(5))
        two = EmbeddedData(["a", "b"], np.zeros((2, 2, 3)), np.zeros((2, 3)), np.zeros((2, 1)))
        with pytest.raises(InputError):
            attribution_report(m, two, self._thr(1), None, ["k"], ["p", "q"])


class TestAggregate:
    def _m(self, a, acc):
        return MetricsSummary(["k"], [a], [acc])

    def test_identical_zero_std(self):
        agg = multi_seed_aggregate([self._m(0.7, 0.8)] * 3)
        assert agg.auc[0].std == 0.0 and agg.macro_accuracy.std == 0.0

    def test_population_std(self):
        agg = multi_seed_aggregate([self._m(v, 0.5) for v in (0.7, 0.8, 0.9)])
        assert agg.auc[0].mean == pytest.approx(0.8, abs=1e-15)
        assert agg.auc[0].std == pytest.approx(math.sqrt(0.02 / 3), abs=1e-15)
        assert agg.auc[0].std == pytest.approx(0.0816, abs=1e-4)

    def test_missing_flagged(self):
        agg = multi_seed_aggregate([self._m(0.7, 0.5), self._m(None, 0.5), self._m(0.9, 0.5)])
        s = agg.auc[0]
        assert s.mean == pytest.approx(0.8) and s.n == 2 and s.incomplete

    def test_class_mismatch(self):
        with pytest.raises(InputError):
            multi_seed_aggregate([self._m(0.5, 0.5), MetricsSummary(["z"], [0.5], [0.5])])

    def test_json_layout(self):
        doc = multi_seed_aggregate([self._m(0.7, 0.5)]).to_json()
        assert set(doc["per_class"]["k"]) == {"AUC", "Accuracy"}
        assert doc["macro"]["AUC"]["mean"] == 0.7 and doc["n_seeds"] == 1


def test_evaluate_uses_train_for_thresholds():
    rng = np.random.default_rng(0)
    m = init_model(2, 2, 3, rng, (4,), (3,))
    mk = lambda n: EmbeddedData([str(i) for i in range(n)], rng.normal(size=(n, 2, 3)),
                                rng.normal(size=(n, 3)), rng.integers(0, 2, (n, 2)).astype(float))
    train, test = mk(20), mk(10)
    summary, thr = evaluate(m, train, test, ["a", "b"])
    flipped = EmbeddedData(test.ids, test.partitions, test.global_, 1 - test.labels)
    _, thr2 = evaluate(m, train, flipped, ["a", "b"])
    np.testing.assert_array_equal(thr.thresholds, thr2.thresholds)
    assert all(0 <= a <= 1 for a in summary.accuracy)
