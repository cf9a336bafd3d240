"""Two-level stacking over per-window probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import (
    DegenerateLabels,
    DimensionMismatch,
    MissingWindowModel,
    ProvenanceMismatch,
    ValidationError,
    WindowSetMismatch,
)
from .model import EncoderState, predict_proba, sigmoid
from .partitions import Partition, ValidationPartition, require
from .validation import check_binary_labels, check_probabilities


class MetaLearner(ClassifierMixin, BaseEstimator):
    """L2-regularized logistic regression fitted by damped Newton steps.

    Minimizes ``sum_i logloss_i + l2_strength/2 * ||w||^2`` (intercept
    unpenalized) until the gradient norm drops below ``tol`` or ``max_iter``
    steps have run; the lowest-objective iterate is kept.
    """

    def __init__(self, l2_strength=1.0, max_iter=100, tol=1e-8):
        self.l2_strength = l2_strength
        self.max_iter = max_iter
        self.tol = tol

    def _objective(self, A, y, theta):
        z = A @ theta
        # log(1 + e^z) - y z, stable for either sign
        loss = np.sum(np.logaddexp(0.0, z) - y * z)
        return loss + 0.5 * self.l2_strength * np.dot(theta[:-1], theta[:-1])

    def fit(self, X, y):
        X = check_probabilities(X)
        y = check_binary_labels(y, len(X), both_classes=True).astype(np.float64)
        if self.l2_strength < 0:
            raise ValidationError("l2_strength must be nonnegative")
        A = np.column_stack([X, np.ones(len(X))])
        K = X.shape[1]
        reg = np.full(K + 1, float(self.l2_strength))
        reg[-1] = 0.0
        theta = np.zeros(K + 1)
        theta[-1] = np.log(y.mean() / (1 - y.mean()))
        obj = self._objective(A, y, theta)
        best = (obj, theta.copy())
        self.n_iter_ = 0
        for it in range(1, self.max_iter + 1):
            p = sigmoid(A @ theta)
            grad = A.T @ (p - y) + reg * theta
            self.grad_norm_ = float(np.linalg.norm(grad))
            if self.grad_norm_ < self.tol:
                break
            H = (A * (p * (1 - p))[:, None]).T @ A + np.diag(reg) + 1e-12 * np.eye(K + 1)
            step = np.linalg.solve(H, grad)
            t = 1.0
            while t > 1e-10:
                cand = theta - t * step
                cand_obj = self._objective(A, y, cand)
                if cand_obj <= obj:
                    break
                t *= 0.5
            else:
                break
            theta, obj = cand, cand_obj
            self.n_iter_ = it
            if obj < best[0]:
                best = (obj, theta.copy())
        theta = best[1]
        p = sigmoid(A @ theta)
        self.grad_norm_ = float(np.linalg.norm(A.T @ (p - y) + reg * theta))
        self.coef_ = theta[:-1].copy()
        self.intercept_ = float(theta[-1])
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_probabilities(X, len(self.coef_))
        return X @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = sigmoid(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def to_dict(self, windows=()):
        check_is_fitted(self, "coef_")
        return {
            "windows": list(windows),
            "weights": [float(w) for w in self.coef_],
            "bias": self.intercept_,
            "l2_strength": float(self.l2_strength),
        }

    @classmethod
    def from_dict(cls, d):
        meta = cls(l2_strength=d["l2_strength"])
        meta.coef_ = np.asarray(d["weights"], dtype=np.float64)
        meta.intercept_ = float(d["bias"])
        meta.classes_ = np.array([0, 1])
        return meta


@dataclass
class ProbabilityMatrix:
    values: np.ndarray
    windows: tuple
    partition: Partition

    @property
    def labels(self):
        return self.partition.labels


def _ordered_models(base_models, windows):
    if isinstance(base_models, dict):
        missing = [w for w in windows if w not in base_models]
        if missing:
            raise MissingWindowModel(f"no base model for windows {missing}")
        return [base_models[w] for w in windows]
    models = list(base_models)
    names = [m.window_name for m in models]
    missing = [w for w in windows if w not in names]
    if missing:
        raise MissingWindowModel(f"no base model for windows {missing}")
    return [models[names.index(w)] for w in windows]


def collect_probabilities(base_models, partition: Partition, windows=None) -> ProbabilityMatrix:
    """Row ``i`` holds each window model's probability for patient ``i``."""
    windows = tuple(windows if windows is not None else partition.windows)
    models = _ordered_models(base_models, windows)
    for m in models:
        if m.trainable:
            raise ValidationError(f"base model {m.window_name!r} must be frozen")
    cols = []
    for w, m in zip(windows, models):
        if w not in partition.arrays:
            raise WindowSetMismatch(f"partition has no data for window {w!r}")
        cols.append(predict_proba(m, partition.arrays[w]))
    values = np.column_stack(cols) if cols else np.zeros((len(partition), 0))
    return ProbabilityMatrix(values, windows, partition)


def fit_meta(probabilities: ProbabilityMatrix, l2_strength: float = 1.0) -> MetaLearner:
    """Fit the meta-learner; only validation-partition probabilities are accepted."""
    require(probabilities.partition, ValidationPartition, "the meta-learner")
    y = probabilities.labels
    if len(np.unique(y)) < 2:
        raise DegenerateLabels("validation labels hold a single class")
    return MetaLearner(l2_strength=l2_strength).fit(probabilities.values, y)


def predict_ensemble(meta: MetaLearner, p):
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != len(meta.coef_):
        raise DimensionMismatch(f"probability vector of length {p.shape[-1]} for {len(meta.coef_)} windows")
    out = meta.predict_proba(p.reshape(-1, p.shape[-1]))[:, 1]
    return float(out[0]) if p.ndim == 1 else out


@dataclass
class EnsemblePipeline:
    """Frozen per-window base models plus a fitted meta-learner."""

    windows: tuple
    base_models: dict
    meta: MetaLearner
    provenance: str

    def check_windows(self, partition: Partition):
        missing = [w for w in self.windows if w not in partition.arrays]
        if missing:
            raise WindowSetMismatch(f"target data lacks windows {missing} used by the {self.provenance} pipeline")

    def probabilities(self, partition: Partition) -> ProbabilityMatrix:
        self.check_windows(partition)
        return collect_probabilities(self.base_models, partition, self.windows)

    def predict_proba(self, partition: Partition):
        return predict_ensemble(self.meta, self.probabilities(partition).values)

    def copy(self):
        models = {w: m.clone() for w, m in self.base_models.items()}
        return EnsemblePipeline(self.windows, models, MetaLearner.from_dict(self.meta.to_dict()), self.provenance)

    def describe(self):
        return {
            "provenance": self.provenance,
            "meta": self.meta.to_dict(self.windows),
            "base_models": {w: {"provenance": m.provenance, "hash": m.parameter_hash()} for w, m in self.base_models.items()},
        }


def build_pipelines(
    teacher: EncoderState,
    supervised_models: dict,
    distilled_models: dict,
    val: ValidationPartition,
    windows=None,
    l2_strength: float = 1.0,
):
    """Supervised ensemble (K supervised models) and distilled ensemble (teacher + K-1 students)."""
    require(val, ValidationPartition, "the meta-learner")
    windows = tuple(windows or supervised_models)
    for w, m in supervised_models.items():
        if m.provenance != "supervised":
            raise ProvenanceMismatch(f"{w}: {m.provenance} model in the supervised pipeline")
    for w, m in distilled_models.items():
        if m.provenance != "distilled":
            raise ProvenanceMismatch(f"{w}: {m.provenance} model offered as a distilled student")
    if teacher.provenance != "supervised":
        raise ProvenanceMismatch("the teacher must come from supervised training")
    if teacher.window_name in distilled_models:
        raise ProvenanceMismatch("the teacher window cannot also have a distilled student")

    distilled_base = {w: (teacher if w == teacher.window_name else distilled_models.get(w)) for w in windows}
    missing = [w for w, m in distilled_base.items() if m is None]
    if missing:
        raise MissingWindowModel(f"no distilled student for windows {missing}")

    pipelines = []
    for name, models in (("supervised", supervised_models), ("distilled", distilled_base)):
        probs = collect_probabilities(models, val, windows)
        pipelines.append(EnsemblePipeline(windows, {w: models[w] for w in windows}, fit_meta(probs, l2_strength), name))
    return tuple(pipelines)
