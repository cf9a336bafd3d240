"""Metrics, bootstrap intervals, paired tests, agreement counts and Grad-CAM."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import stats

from .exceptions import LengthMismatch, SingleClass, UnknownLayer, ValidationError

THRESHOLD = 0.5
METRICS = ("accuracy", "f1", "recall", "precision", "auc")


def compute_auc(scores, labels) -> float:
    """Mann-Whitney AUC: concordant positive/negative pairs plus half the ties."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if len(scores) != len(labels):
        raise LengthMismatch(f"{len(scores)} scores for {len(labels)} labels")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both classes")
    ranks = stats.rankdata(scores)  # average ranks give ties half credit
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _counts(probs, labels):
    pred = np.asarray(probs) >= THRESHOLD
    y = np.asarray(labels) == 1
    return np.sum(pred & y), np.sum(pred & ~y), np.sum(~pred & y), len(y)


def accuracy(probs, labels):
    tp, fp, fn, n = _counts(probs, labels)
    return float((n - fp - fn) / n)


def precision(probs, labels):
    tp, fp, _, _ = _counts(probs, labels)
    return float(tp / (tp + fp)) if tp + fp else 0.0


def recall(probs, labels):
    tp, _, fn, _ = _counts(probs, labels)
    return float(tp / (tp + fn)) if tp + fn else 0.0


def f1(probs, labels):
    tp, fp, fn, _ = _counts(probs, labels)
    return float(2 * tp / (2 * tp + fp + fn)) if tp else 0.0


METRIC_FUNCS = {"accuracy": accuracy, "f1": f1, "recall": recall, "precision": precision, "auc": compute_auc}


def bootstrap_ci(scores, labels, metric="auc", n=1000, seed=0, alpha=0.05):
    """Percentile bootstrap interval over patient-level resamples.

    For AUC, resamples holding a single class are redrawn; threshold metrics
    are evaluated on every resample as drawn.
    """
    fn = METRIC_FUNCS[metric] if isinstance(metric, str) else metric
    needs_both = fn is compute_auc
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    N = len(scores)
    if N < 2 or len(labels) != N:
        raise ValidationError("bootstrap needs at least two paired scores and labels")
    if len(np.unique(labels)) < 2 and needs_both:
        raise SingleClass("the full set holds a single class")
    rng = np.random.default_rng(seed)
    values = np.empty(n)
    for b in range(n):
        idx = rng.integers(0, N, N)
        while needs_both and len(np.unique(labels[idx])) < 2:
            idx = rng.integers(0, N, N)
        values[b] = fn(scores[idx], labels[idx])
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi)


def paired_test(a, b):
    """Paired t-test on ``a - b``.

    Zero-variance differences (spread within rounding of the values):
    statistic 0 and p = 1 when the mean is 0, otherwise an infinite
    statistic with p = 0.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatch(f"paired samples of lengths {len(a)} and {len(b)}")
    d = a - b
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1.0)
    if len(d) < 2 or np.ptp(d) <= 1e-12 * scale:
        m = d.mean() if len(d) else 0.0
        if abs(m) <= 1e-12 * scale:
            return 0.0, 1.0
        return float(np.copysign(np.inf, m)), 0.0
    res = stats.ttest_rel(a, b)
    return float(res.statistic), float(res.pvalue)


def true_class_probability(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    return np.where(np.asarray(labels) == 1, probs, 1.0 - probs)


@dataclass
class VennCounts:
    corrected: int
    joint_correct: int
    new_errors: int
    both_wrong: int

    @property
    def total(self):
        return self.corrected + self.joint_correct + self.new_errors + self.both_wrong

    def to_dict(self):
        return asdict(self)


def venn_agreement(sup_mask, dist_mask) -> VennCounts:
    s = np.asarray(sup_mask, dtype=bool)
    d = np.asarray(dist_mask, dtype=bool)
    if s.shape != d.shape:
        raise LengthMismatch(f"masks of lengths {s.size} and {d.size}")
    return VennCounts(
        corrected=int(np.sum(~s & d)),
        joint_correct=int(np.sum(s & d)),
        new_errors=int(np.sum(s & ~d)),
        both_wrong=int(np.sum(~s & ~d)),
    )


@dataclass
class MetricsReport:
    accuracy: float
    f1: float
    recall: float
    precision: float
    auc: float
    ci: dict
    n_bootstrap: int
    per_sample_correct: np.ndarray
    seed: int
    probabilities: np.ndarray = field(repr=False, default=None)
    labels: np.ndarray = field(repr=False, default=None)
    patient_ids: tuple = field(repr=False, default=())

    def point(self, metric):
        return getattr(self, metric)

    def to_dict(self, digits=None):
        def r(v):
            return round(float(v), digits) if digits is not None else float(v)

        return {
            "metrics": {m: {"value": r(self.point(m)), "ci_low": r(self.ci[m][0]), "ci_high": r(self.ci[m][1])} for m in METRICS},
            "n": int(len(self.per_sample_correct)),
            "n_bootstrap": self.n_bootstrap,
            "seed": self.seed,
            "threshold": THRESHOLD,
        }

    def write(self, json_path, csv_path=None):
        json_path = Path(json_path)
        json_path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["patient_id", "label", "probability", "correct"])
                for pid, y, p, c in zip(self.patient_ids, self.labels, self.probabilities, self.per_sample_correct):
                    w.writerow([pid, int(y), f"{p:.8f}", int(c)])
        return json_path


def evaluate(probabilities, labels, patient_ids=None, n_bootstrap=1000, seed=0) -> MetricsReport:
    """Point metrics at threshold 0.5 with percentile bootstrap intervals.

    Interval endpoints are widened to include the point estimate when the
    percentile interval happens to exclude it.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    points = {m: METRIC_FUNCS[m](p, y) for m in METRICS}
    ci = {}
    for i, m in enumerate(METRICS):
        lo, hi = bootstrap_ci(p, y, m, n=n_bootstrap, seed=seed + i)
        ci[m] = (min(lo, points[m]), max(hi, points[m]))
    correct = (p >= THRESHOLD).astype(int) == y
    ids = tuple(patient_ids) if patient_ids is not None else tuple(str(i) for i in range(len(y)))
    return MetricsReport(**points, ci=ci, n_bootstrap=n_bootstrap, per_sample_correct=correct, seed=seed, probabilities=p, labels=y, patient_ids=ids)


# --------------------------------------------------------------------- Grad-CAM


@dataclass
class AttentionMap:
    heatmap: np.ndarray
    target_layer: str


def _resolve_layer(encoder, target_layer):
    names = getattr(encoder, "layer_names", None)
    if target_layer is None:
        if not names:
            raise UnknownLayer("encoder exposes no convolutional stages")
        target_layer = names[-1]
    modules = dict(encoder.named_modules())
    if target_layer not in modules or target_layer == "":
        raise UnknownLayer(f"no layer named {target_layer!r}; choose from {names}")
    return target_layer, modules[target_layer]


def cam_from(activation: np.ndarray, gradient: np.ndarray, out_shape) -> np.ndarray:
    """Combine one sample's ``(C, t, h, w)`` activation and gradient into a normalized map."""
    weights = gradient.mean(axis=(1, 2, 3))
    cam = np.maximum(np.tensordot(weights, activation, axes=1), 0.0)
    up = F.interpolate(torch.as_tensor(cam, dtype=torch.float64)[None, None], size=tuple(out_shape), mode="trilinear", align_corners=False)
    up = up[0, 0].numpy()
    peak = up.max()
    return up / peak if peak > 0 else np.zeros_like(up)


def grad_cam(state, x, target_layer=None) -> AttentionMap:
    """Gradient-weighted activation map of the logit at ``target_layer`` (default: final stage)."""
    from .model import as_batch

    name, layer = _resolve_layer(state.net.encoder, target_layer)
    t = as_batch(state, x)[:1].clone().requires_grad_(True)  # frozen nets still need a graph
    captured = {}

    def hook(_module, _inp, out):
        captured["a"] = out

    handle = layer.register_forward_hook(hook)
    was_training = state.net.training
    state.net.eval()
    try:
        with torch.enable_grad():
            _, z = state.net(t)
            act = captured["a"]
            grad = torch.autograd.grad(z.sum(), act)[0]
    finally:
        handle.remove()
        state.net.train(was_training)
    heat = cam_from(act[0].detach().double().numpy(), grad[0].double().numpy(), t.shape[-3:])
    return AttentionMap(heat, name)
