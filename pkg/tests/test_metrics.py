import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advbench import metrics as M
from advbench.data import LabelState

from helpers import metric_oracle_errors, oracle_auc, oracle_pearson_p


def _vec(*head):
    return np.array(list(head) + [0.0] * (18 - len(head)))


def test_k_accuracy_hand_example():
    pred = _vec(0.9, 0.1, 0.8, 0.2)
    truth = _vec(1, 0, 0, 1)
    assert M.topk_indices(pred, 2).indices == (0, 2)
    assert M.k_accuracy_input(pred, truth, 2) == 0.5


def test_topk_ties_go_to_lower_index():
    assert M.topk_indices(np.zeros(18), 3).indices == (0, 1, 2)
    assert M.topk_indices(_vec(0, 1, 1, 1), 2).indices == (1, 2)


def test_k_equal_18_is_always_one():
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert M.k_accuracy_input(rng.uniform(size=18), rng.uniform(size=18), 18) == 1.0


def test_k_out_of_range():
    with pytest.raises(M.MetricError):
        M.k_accuracy_input(np.zeros(18), np.zeros(18), 0)
    with pytest.raises(M.MetricError):
        M.k_accuracy_input(np.zeros(18), np.zeros(18), 19)


def test_k_accuracy_invariant_under_monotone_maps():
    rng = np.random.default_rng(1)
    for _ in range(100):
        z = rng.normal(size=18)
        t = rng.uniform(size=18)
        k = int(rng.integers(1, 19))
        base = M.k_accuracy_input(z, t, k)
        assert M.k_accuracy_input(1 / (1 + np.exp(-z)), t, k) == base
        assert M.k_accuracy_input(3 * z + 7, t, k) == base


def test_k_accuracy_percent_is_exact():
    truth = np.tile(_vec(1), (100, 1))
    pred = truth.copy()
    pred[:53] = _vec(0, 1)
    assert M.k_accuracy_percent(pred, truth, 1) == 47.0
    assert M.k_accuracy_percent(truth, truth, 1) == 100.0


def test_k1_is_top1_accuracy():
    rng = np.random.default_rng(2)
    p, t = rng.uniform(size=(200, 18)), rng.uniform(size=(200, 18))
    top1 = (p.argmax(axis=1) == t.argmax(axis=1)).mean()
    assert M.k_accuracy_batch(p, t, 1).mean() == top1


def test_metric_oracles():
    worst = metric_oracle_errors(200, seed=11)
    assert max(worst.values()) < 1e-9, worst


def test_mlacc_examples():
    th = np.full(18, 0.5)
    t = _vec(1, 0, 1)
    assert M.mlacc(np.where(t >= 0.5, 0.9, 0.1), t, th, np.ones(18, bool)) == 1.0
    assert M.mlacc(np.where(t >= 0.5, 0.1, 0.9), t, th, np.ones(18, bool)) == 0.0
    with pytest.raises(M.MetricError):
        M.mlacc(np.zeros(18), t, np.zeros(18), np.ones(18, bool))


def test_risk_examples_and_linearity():
    c = np.ones(18)
    c[0] = 0
    assert M.risk(np.ones(18), c) == 1.0
    assert M.risk(np.zeros(18), c) == 0.0
    rng = np.random.default_rng(3)
    p1, p2, row = rng.uniform(size=18), rng.uniform(size=18), rng.uniform(size=18)
    assert M.risk(p1 + p2, row) == pytest.approx(M.risk(p1, row) + M.risk(p2, row), abs=1e-15)


def test_loss_metrics_zero_at_target():
    t = np.linspace(0.05, 0.95, 18)
    z = np.log(t / (1 - t))
    assert M.metric_mse(z, t, np.ones(18, bool)) == pytest.approx(0.0, abs=1e-28)
    assert M.metric_bce(z, t, np.ones(18, bool)) == pytest.approx(
        np.mean(-(t * np.log(t) + (1 - t) * np.log(1 - t))), abs=1e-12
    )


def test_auc_examples():
    assert M.binary_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert M.binary_auc([0.1, 0.2, 0.9, 0.8], [1, 1, 0, 0]) == 0.0
    assert M.binary_auc([0.5] * 4, [1, 0, 1, 0]) == 0.5
    with pytest.raises(M.MetricError):
        M.binary_auc([0.1, 0.2], [1, 1])


def test_macro_auc_skips_single_class_labels_and_uncertain():
    rng = np.random.default_rng(4)
    labels = rng.choice([0, 1], size=(60, 18)).astype(np.int8)
    labels[:, 5] = 0
    labels[:10, 6] = LabelState.UNCERTAIN
    probs = rng.uniform(size=(60, 18))
    per = M.label_aucs(probs, labels)
    assert np.isnan(per[5])
    keep = labels[:, 6] != LabelState.UNCERTAIN
    assert per[6] == pytest.approx(oracle_auc(probs[keep, 6], labels[keep, 6] == 1), abs=1e-12)
    assert M.macro_auc(probs, labels) == pytest.approx(np.nanmean(per), abs=1e-15)


def _series_with_r(n, r):
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=n), rng.normal(size=n)
    a = a - a.mean()
    b = b - b.mean()
    b = b - (a @ b) / (a @ a) * a  # orthogonal to a
    a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
    return a, r * a + math.sqrt(1 - r * r) * b


def test_pearson_fixture_n10_r08():
    a, b = _series_with_r(10, 0.8)
    res = M.pearson_with_pvalue(a, b)
    assert res.r == pytest.approx(0.8, abs=1e-12)
    assert res.p == pytest.approx(oracle_pearson_p(0.8, 10), abs=1e-6)
    # the exact value is 0.005456; the published figure is a rounded approximation
    assert res.p == pytest.approx(0.00547, abs=2e-5)


def test_pearson_p_matches_oracle_across_r_and_n():
    for n in (3, 5, 10, 40, 200):
        for r in (-0.95, -0.3, 0.05, 0.5, 0.99):
            a, b = _series_with_r(n, r)
            res = M.pearson_with_pvalue(a, b)
            assert res.p == pytest.approx(oracle_pearson_p(res.r, n), abs=1e-6)


def test_pearson_against_scipy():
    stats = pytest.importorskip("scipy.stats")
    rng = np.random.default_rng(5)
    for _ in range(50):
        n = int(rng.integers(3, 60))
        a, b = rng.normal(size=n), rng.normal(size=n)
        b = b + rng.uniform(-1, 1) * a
        ref = stats.pearsonr(a, b)
        res = M.pearson_with_pvalue(a, b)
        assert res.r == pytest.approx(ref[0], abs=1e-12)
        assert res.p == pytest.approx(ref[1], abs=1e-9)


def test_pearson_edge_cases():
    a, b = _series_with_r(5, 0.0)
    res = M.pearson_with_pvalue(a, b)
    assert res.r == pytest.approx(0.0, abs=1e-15) and res.p == pytest.approx(1.0, abs=1e-12)
    x = np.arange(7.0)
    assert M.pearson_with_pvalue(x, 2 * x + 3) == M.PearsonResult(1.0, 0.0)
    assert M.pearson_with_pvalue(x, x).r == 1.0
    with pytest.raises(M.MetricError, match="constant"):
        M.pearson_with_pvalue(x, np.ones(7))
    with pytest.raises(M.MetricError):
        M.pearson_with_pvalue(x[:2], x[:2])


def test_self_correlation_is_exactly_one_for_noisy_series():
    rng = np.random.default_rng(6)
    for _ in range(100):
        x = rng.uniform(size=int(rng.integers(3, 100)))
        assert M.pearson_with_pvalue(x, x).r == 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=3, max_size=30))
def test_pearson_bounded_and_symmetric(pairs):
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    if np.ptp(a) < 1e-6 or np.ptp(b) < 1e-6:
        return
    ab, ba = M.pearson_with_pvalue(a, b), M.pearson_with_pvalue(b, a)
    assert ab.r == ba.r
    assert -1 <= ab.r <= 1 and 0 <= ab.p <= 1


def test_betainc_known_values():
    assert M.betainc(1, 1, 0.3) == pytest.approx(0.3, abs=1e-15)
    assert M.betainc(2, 3, 0.0) == 0.0 and M.betainc(2, 3, 1.0) == 1.0
    assert M.betainc(0.5, 0.5, 0.5) == pytest.approx(0.5, abs=1e-14)


def test_metric_series_length_check():
    with pytest.raises(M.MetricError):
        M.MetricSeries("mse", [1.0, 2.0], [0])
