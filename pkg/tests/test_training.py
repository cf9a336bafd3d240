import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.linear_model import LogisticRegression

from xwd.exceptions import EmptyMetrics, LeakageError, TeacherNotFrozen, ValidationError
from xwd.model import EncoderConfig, build_encoder, checkpoint_bytes, forward_features, predict_proba
from xwd.partitions import ROLES, TrainPartition
from xwd.training import (
    DistilledWindowClassifier,
    EarlyStopping,
    TrainConfig,
    WindowClassifier,
    cosine_lr,
    distill_loss,
    fit_encoder,
    select_teacher,
    train_distilled,
    train_supervised,
)

DIFFUSE_VAL = {"lung": 0.7835, "mediastinal": 0.8960, "zero": 0.7467, "hrct": 0.7739, "bone": 0.8111}
FOCAL_VAL = {"pe": 0.8819, "zero": 0.8310, "mediastinal": 0.8173, "hrct": 0.7953, "lung": 0.7952}


# ---------------------------------------------------------------- schedule


def test_cosine_endpoints():
    assert cosine_lr(1e-3, 0, 40) == 1e-3
    assert abs(cosine_lr(1e-3, 40, 40)) < 1e-12
    assert cosine_lr(1e-3, 20, 40) == pytest.approx(5e-4)


def test_patience_example():
    stopper = EarlyStopping(patience=10)
    series = [1.0, 0.9] + [0.91] * 10
    stops = [stopper.update(v) for v in series]
    assert stops.index(True) + 1 == 12
    assert stopper.best_epoch == 2


def test_patience_requires_strict_improvement():
    stopper = EarlyStopping(patience=2, min_delta=1e-6)
    assert not stopper.update(1.0)
    assert not stopper.update(1.0 - 1e-7)
    assert stopper.update(1.0 - 5e-7)
    assert stopper.best_epoch == 1


# ------------------------------------------------------------------- losses


def test_loss_zero_distance():
    h = torch.randn(3, 8)
    z, y = torch.randn(3), torch.tensor([0.0, 1.0, 1.0])
    total, cls, kd = distill_loss(h, h.clone(), z, y)
    assert kd.item() == 0.0
    assert total.item() == pytest.approx(0.5 * cls.item(), abs=1e-12)


def test_loss_unit_offsets():
    h_t = torch.randn(1, 4)
    _, _, kd = distill_loss(h_t + 1.0, h_t, torch.zeros(1), torch.ones(1))
    assert kd.item() == pytest.approx(1.0, abs=1e-6)


def test_loss_convex_combination():
    assert 0.5 * 0.6 + 0.5 * 0.2 == pytest.approx(0.4)
    h = torch.zeros(2, 4)
    total, cls, kd = distill_loss(h + 0.2**0.5, h, torch.zeros(2), torch.ones(2))
    assert total.item() == pytest.approx(0.5 * math.log(2) + 0.5 * 0.2, abs=1e-7)


def test_teacher_features_detached():
    h_s = torch.randn(2, 4, requires_grad=True)
    h_t = torch.randn(2, 4, requires_grad=True)
    total, _, _ = distill_loss(h_s, h_t, torch.zeros(2), torch.ones(2))
    total.backward()
    assert h_t.grad is None and h_s.grad is not None


# --------------------------------------------------------- teacher selection


def test_teacher_paper_tables():
    assert select_teacher(DIFFUSE_VAL, ["lung", "mediastinal", "hrct", "zero", "bone"]).teacher_window == "mediastinal"
    assert select_teacher(FOCAL_VAL, ["lung", "mediastinal", "hrct", "zero", "pe"]).teacher_window == "pe"


def test_teacher_tie_goes_first():
    sel = select_teacher({"lung": 0.8, "mediastinal": 0.8, "hrct": 0.1}, ["lung", "mediastinal", "hrct"])
    assert sel.teacher_window == "lung"
    assert sel.student_windows == ("mediastinal", "hrct")


def test_teacher_errors():
    with pytest.raises(EmptyMetrics):
        select_teacher({})
    with pytest.raises(ValidationError):
        select_teacher({"a": 0.5, "b": float("nan")})


@settings(max_examples=200, deadline=None)
@given(values=st.lists(st.integers(0, 10000).map(lambda v: v / 10000), min_size=2, max_size=6), power=st.floats(0.2, 5), shift=st.floats(-3, 3))
def test_teacher_monotone_invariance(values, power, shift):
    names = [f"w{i}" for i in range(len(values))]
    base = select_teacher(dict(zip(names, values)), names)
    warped = select_teacher({n: math.exp(v**power) + shift for n, v in zip(names, values)}, names)
    assert base.teacher_window == warped.teacher_window
    assert base.val_auc[base.teacher_window] == max(values)


# ---------------------------------------------------------------- fit loop


def test_separable_toy_task():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.5, 2, 40) * rng.choice([-1, 1], 40)
    y = (x > 0).astype(int)
    # a logistic fit on the same scalars gets well under the bar
    ref = LogisticRegression(C=1e4).fit(x[:, None], y)
    ref_p = ref.predict_proba(x[:, None])[:, 1]
    assert -np.mean(y * np.log(ref_p) + (1 - y) * np.log(1 - ref_p)) < 0.05

    cfg = EncoderConfig(feature_dim=8, stage_channels=(8,), input_shape=(1, 1, 1, 1), se_reduction=2, blocks_per_stage=(1,), stem_channels=8)
    state = build_encoder(cfg, seed=0)
    X = x.reshape(-1, 1, 1, 1)
    fit_encoder(state, X, y, X, y, TrainConfig(lr=1e-2, epochs=40, batch_size=8, seed=0))
    p = np.clip(predict_proba(state, X), 1e-12, 1 - 1e-12)
    assert -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)) < 0.05


def test_supervised_log_and_best_checkpoint(small_parts, small_encoder, tmp_path):
    cfg = TrainConfig(epochs=4, seed=1)
    state, log = train_supervised("lung", small_parts["train"], small_parts["val"], cfg, small_encoder, log_path=tmp_path / "log.jsonl")
    assert [r["epoch"] for r in log] == [1, 2, 3, 4]
    lines = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["val_loss"] for r in lines] == [r["val_loss"] for r in log]
    assert {"lr", "train_loss", "val_loss", "val_auc", "wall_time"} <= set(log[0])
    best = min(range(len(log)), key=lambda i: log[i]["val_loss"])
    assert state.info["best_epoch"] == best + 1
    # restored weights reproduce the best epoch's validation loss
    p = np.clip(predict_proba(state, small_parts["val"].arrays["lung"]), 1e-7, 1 - 1e-7)
    y = small_parts["val"].labels
    bce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert bce == pytest.approx(min(r["val_loss"] for r in log), abs=1e-4)
    assert state.provenance == "supervised"


def test_supervised_is_seeded(small_parts, small_encoder):
    cfg = TrainConfig(epochs=2, seed=4)
    a, _ = train_supervised("lung", small_parts["train"], small_parts["val"], cfg, small_encoder)
    b, _ = train_supervised("lung", small_parts["train"], small_parts["val"], cfg, small_encoder)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)


def test_supervised_rejects_wrong_roles(small_parts, small_encoder, quick_train):
    with pytest.raises(LeakageError):
        train_supervised("lung", small_parts["val"], small_parts["val"], quick_train, small_encoder)
    with pytest.raises(LeakageError):
        train_supervised("lung", small_parts["train"], small_parts["test"], quick_train, small_encoder)


def test_teacher_untouched_by_distillation(small_parts, small_encoder):
    cfg = TrainConfig(epochs=2, seed=0)
    teacher, _ = train_supervised("mediastinal", small_parts["train"], small_parts["val"], cfg, small_encoder)
    with pytest.raises(TeacherNotFrozen):
        train_distilled("lung", teacher, small_parts["train"], small_parts["val"], cfg, small_encoder)
    teacher.freeze()
    before = checkpoint_bytes(teacher)
    x = small_parts["val"].arrays["mediastinal"]
    feats = forward_features(teacher, x)
    student, log = train_distilled("lung", teacher, small_parts["train"], small_parts["val"], cfg, small_encoder)
    assert checkpoint_bytes(teacher) == before
    assert np.array_equal(forward_features(teacher, x), feats)
    assert student.provenance == "distilled"
    assert student.info["teacher_hash"] == teacher.parameter_hash()
    for r in log:
        assert abs(r["train_loss"] - 0.5 * r["train_cls"] - 0.5 * r["train_kd"]) < 1e-7
        assert abs(r["val_loss"] - 0.5 * r["val_cls"] - 0.5 * r["val_kd"]) < 1e-7


def test_beta_zero_matches_supervised(small_parts, small_encoder):
    base = TrainConfig(epochs=2, seed=3)
    teacher, _ = train_supervised("mediastinal", small_parts["train"], small_parts["val"], base, small_encoder)
    teacher.freeze()
    sup, sup_log = train_supervised("lung", small_parts["train"], small_parts["val"], base, small_encoder)
    dist, dist_log = train_distilled("lung", teacher, small_parts["train"], small_parts["val"], replace(base, alpha=1.0, beta=0.0), small_encoder)
    assert [r["train_cls"] for r in sup_log] == [r["train_cls"] for r in dist_log]
    assert sup.parameter_hash() == dist.parameter_hash()


def test_beta_zero_update_direction(small_encoder):
    # with beta = 0 the gradient is alpha times the supervised one
    x = torch.randn(3, 1, 4, 16, 16)
    y = torch.tensor([0.0, 1.0, 1.0])
    grads = []
    for alpha in (1.0, 0.5):
        state = build_encoder(small_encoder, seed=0)
        h, z = state.net(x)
        total, _, _ = distill_loss(h, torch.randn_like(h), z, y, alpha, 0.0)
        total.backward()
        grads.append(torch.cat([p.grad.ravel() for p in state.net.parameters()]))
    assert torch.allclose(grads[1], 0.5 * grads[0], atol=1e-7)


def test_head_only_fit_keeps_encoder(small_parts, small_encoder):
    state = build_encoder(small_encoder, seed=0)
    enc, head = state.parameter_hash("encoder"), state.parameter_hash("head")
    X, y = small_parts["train"].arrays["lung"], small_parts["train"].labels
    fit_encoder(state, X, y, X, y, TrainConfig(epochs=2, lr=1e-2), parameters="head")
    assert state.parameter_hash("encoder") == enc
    assert state.parameter_hash("head") != head
    assert all(p.requires_grad for p in state.net.parameters())


# --------------------------------------------------------------- estimators


def test_window_classifier_api(small_parts, small_encoder):
    clf = WindowClassifier(encoder_config=small_encoder, train_config=TrainConfig(epochs=2), window_name="lung")
    params = clf.get_params()
    assert params["window_name"] == "lung"
    assert clone(clf).get_params()["train_config"] == TrainConfig(epochs=2)
    tr, va = small_parts["train"], small_parts["val"]
    clf.fit(tr.arrays["lung"], tr.labels, eval_set=(va.arrays["lung"], va.labels))
    proba = clf.predict_proba(va.arrays["lung"])
    assert proba.shape == (len(va), 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(clf.predict(va.arrays["lung"])) <= {0, 1}
    assert clf.transform(va.arrays["lung"]).shape == (len(va), 16)
    np.testing.assert_allclose(1 / (1 + np.exp(-clf.decision_function(va.arrays["lung"]))), proba[:, 1], atol=1e-9)


def test_distilled_classifier_api(small_parts, small_encoder):
    tr, va = small_parts["train"], small_parts["val"]
    cfg = TrainConfig(epochs=2)
    teacher = WindowClassifier(small_encoder, cfg, "mediastinal").fit(tr.arrays["mediastinal"], tr.labels).state_
    with pytest.raises(TeacherNotFrozen):
        DistilledWindowClassifier(teacher, small_encoder, cfg, "lung").fit(tr.arrays["lung"], tr.labels, tr.arrays["mediastinal"])
    teacher.freeze()
    clf = DistilledWindowClassifier(teacher, small_encoder, cfg, "lung")
    clf.fit(tr.arrays["lung"], tr.labels, tr.arrays["mediastinal"], eval_set=(va.arrays["lung"], va.labels, va.arrays["mediastinal"]))
    assert clf.state_.provenance == "distilled"
    assert clf.predict_proba(va.arrays["lung"]).shape == (len(va), 2)
    assert "teacher" in clf.get_params()
