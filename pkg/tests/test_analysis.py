import csv
import itertools
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from xwd.analysis import (
    bootstrap_ci,
    cam_from,
    compute_auc,
    evaluate,
    grad_cam,
    paired_test,
    true_class_probability,
    venn_agreement,
)
from xwd.exceptions import LengthMismatch, SingleClass, UnknownLayer
from xwd.model import build_encoder


def _brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    credit = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
    return credit / (len(pos) * len(neg))


# ------------------------------------------------------------------------ AUC


def test_auc_examples():
    assert compute_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert compute_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert compute_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75 == _brute_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])


def test_auc_errors():
    with pytest.raises(SingleClass):
        compute_auc([0.1, 0.2], [1, 1])
    with pytest.raises(LengthMismatch):
        compute_auc([0.1, 0.2], [0, 1, 1])


@settings(max_examples=200, deadline=None)
@given(data=st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=30))
def test_auc_brute_force_with_ties(data):
    scores, labels = zip(*data)
    if len(set(labels)) < 2:
        return
    assert compute_auc(scores, labels) == _brute_auc(scores, labels)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10000))
def test_auc_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=20)
    y = np.r_[0, 1, rng.integers(0, 2, 18)]
    assert compute_auc(s, y) == compute_auc(np.exp(s) * 3 + 1, y)


# ------------------------------------------------------------------ bootstrap


def test_all_correct_accuracy_ci():
    y = np.array([0, 1, 1, 0, 1, 0])
    p = np.where(y == 1, 0.9, 0.1)
    assert bootstrap_ci(p, y, "accuracy", n=500, seed=0) == (1.0, 1.0)
    assert bootstrap_ci(p, y, "auc", n=500, seed=0) == (1.0, 1.0)


def test_bootstrap_seeded(rng):
    p, y = rng.uniform(size=30), rng.integers(0, 2, 30)
    assert bootstrap_ci(p, y, "auc", n=200, seed=3) == bootstrap_ci(p, y, "auc", n=200, seed=3)


@pytest.mark.parametrize("metric", ["accuracy", "auc"])
def test_bootstrap_exhaustive_oracle(metric):
    from xwd.analysis import METRIC_FUNCS

    p = np.array([0.2, 0.7, 0.6, 0.4])
    y = np.array([0, 1, 0, 1])
    fn = METRIC_FUNCS[metric]
    values = []
    for idx in itertools.product(range(4), repeat=4):
        idx = list(idx)
        if metric == "auc" and len(set(y[idx])) < 2:
            continue  # the bootstrap redraws these
        values.append(fn(p[idx], y[idx]))
    exact_lo, exact_hi = np.percentile(values, [2.5, 97.5])
    grain = 0.25  # one patient out of four
    lo, hi = bootstrap_ci(p, y, metric, n=4000, seed=0)
    assert abs(lo - exact_lo) <= grain and abs(hi - exact_hi) <= grain


def test_evaluate_contains_point(rng):
    hits = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        y = r.integers(0, 2, 25)
        y[:2] = (0, 1)
        p = np.clip(y * 0.3 + r.uniform(0, 0.7, 25), 0, 1)
        rep = evaluate(p, y, n_bootstrap=200, seed=seed)
        for m in ("accuracy", "f1", "recall", "precision", "auc"):
            lo, hi = rep.ci[m]
            assert lo <= rep.point(m) <= hi
        raw_lo, raw_hi = bootstrap_ci(p, y, "accuracy", n=200, seed=seed)
        hits += raw_lo <= rep.accuracy <= raw_hi
    assert hits >= 99


def test_threshold_metrics():
    y = np.array([1, 1, 0, 0, 1])
    p = np.array([0.9, 0.4, 0.6, 0.1, 0.5])
    rep = evaluate(p, y, ["a", "b", "c", "d", "e"], n_bootstrap=50)
    # predictions at 0.5: 1 0 1 0 1
    assert rep.accuracy == pytest.approx(3 / 5)
    assert rep.precision == pytest.approx(2 / 3)
    assert rep.recall == pytest.approx(2 / 3)
    assert rep.f1 == pytest.approx(2 / 3)
    assert rep.per_sample_correct.tolist() == [True, False, False, True, True]


def test_report_files(tmp_path):
    y = np.array([1, 0, 1, 0])
    rep = evaluate(np.array([0.8, 0.3, 0.4, 0.2]), y, ["a", "b", "c", "d"], n_bootstrap=20, seed=1)
    rep.write(tmp_path / "r.json", tmp_path / "r.csv")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert set(doc["metrics"]) == {"accuracy", "f1", "recall", "precision", "auc"}
    assert doc["metrics"]["auc"]["value"] == 1.0 and doc["n_bootstrap"] == 20
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert [r["patient_id"] for r in rows] == ["a", "b", "c", "d"]
    assert [r["correct"] for r in rows] == ["1", "1", "0", "1"]


# ---------------------------------------------------------------- paired test


def test_paired_examples():
    a = np.array([0.3, 0.6, 0.9])
    assert paired_test(a, a) == (0.0, 1.0)
    t, p = paired_test(a + 1, a)
    assert np.isinf(t) and t > 0 and p < 1e-6
    t, p = paired_test(np.array([2.0, 0.0, 2.0, 0.0]), np.ones(4))
    assert (t, p) == (0.0, 1.0)


def test_paired_matches_scipy(rng):
    from scipy import stats

    a, b = rng.normal(size=15), rng.normal(size=15)
    t, p = paired_test(a, b)
    ref = stats.ttest_rel(a, b)
    assert t == pytest.approx(ref.statistic) and p == pytest.approx(ref.pvalue)
    with pytest.raises(LengthMismatch):
        paired_test(a, b[:3])


def test_true_class_probability():
    np.testing.assert_allclose(true_class_probability([0.8, 0.3], [1, 0]), [0.8, 0.7])


# ------------------------------------------------------------------------ Venn


def test_venn_example():
    ids = "abcdef"
    sup = [c in "abc" for c in ids]
    dist = [c in "bcde" for c in ids]
    v = venn_agreement(sup, dist)
    assert (v.corrected, v.joint_correct, v.new_errors, v.both_wrong) == (2, 2, 1, 1)


def test_venn_identical():
    m = np.array([True, False, True])
    v = venn_agreement(m, m)
    assert v.corrected == 0 and v.new_errors == 0


@settings(max_examples=200, deadline=None)
@given(pairs=st.lists(st.tuples(st.booleans(), st.booleans()), min_size=0, max_size=50))
def test_venn_conservation(pairs):
    s = np.array([a for a, _ in pairs], dtype=bool)
    d = np.array([b for _, b in pairs], dtype=bool)
    v = venn_agreement(s, d)
    assert v.corrected + v.joint_correct == d.sum()
    assert v.joint_correct + v.new_errors == s.sum()
    assert v.total == len(pairs)


# -------------------------------------------------------------------- Grad-CAM


def test_cam_negative_weights_zero():
    act = np.abs(np.random.default_rng(0).normal(size=(3, 2, 4, 4))) + 0.1
    grad = -np.ones_like(act)
    assert np.all(cam_from(act, grad, (4, 8, 8)) == 0.0)


def test_cam_constant_activation():
    act = np.full((1, 2, 3, 3), 2.5)
    grad = np.full_like(act, 0.7)
    out = cam_from(act, grad, (4, 6, 6))
    np.testing.assert_allclose(out, 1.0)


def test_grad_cam_shape_and_range(small_encoder):
    state = build_encoder(small_encoder, seed=0).freeze()
    x = np.random.default_rng(0).normal(size=(4, 16, 16))
    for layer in (None, "stem", "stage1"):
        amap = grad_cam(state, x, layer)
        assert amap.heatmap.shape == (4, 16, 16)
        assert amap.heatmap.min() >= 0 and amap.heatmap.max() <= 1
    assert grad_cam(state, x).target_layer == "stage2"
    with pytest.raises(UnknownLayer):
        grad_cam(state, x, "stage9")
    assert not any(p.grad is not None for p in state.net.parameters())
