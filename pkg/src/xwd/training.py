"""Per-window supervised training, teacher selection, feature distillation, transfer."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .analysis import compute_auc
from .exceptions import (
    DimensionMismatch,
    Divergence,
    EmptyMetrics,
    SingleClass,
    TeacherNotFrozen,
    ValidationError,
)
from .model import EncoderConfig, EncoderState, build_encoder, forward_features, predict_proba
from .partitions import Partition, TrainPartition, ValidationPartition, require
from .validation import check_binary_labels, check_volumes

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 40
    batch_size: int = 4
    early_stop_patience: int = 10
    alpha: float = 0.5
    beta: float = 0.5
    seed: int = 0
    min_delta: float = 1e-6
    adam_betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.early_stop_patience < 1:
            raise ValidationError("lr, epochs, batch_size and early_stop_patience must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("alpha and beta must be nonnegative")

    def to_dict(self):
        return asdict(self)


def cosine_lr(base_lr: float, t: int, epochs: int) -> float:
    """Learning rate for (0-based) epoch ``t``; reaches 0 at ``t == epochs``."""
    return base_lr * (1.0 + math.cos(math.pi * t / epochs)) / 2.0


class EarlyStopping:
    """Stops after ``patience`` consecutive epochs without a strict improvement.

    Epochs are counted from 1.
    """

    def __init__(self, patience: int, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0
        self.stale = 0

    def update(self, value: float) -> bool:
        """Record one epoch's validation loss; returns ``True`` when training should stop."""
        self.epoch += 1
        if value < self.best - self.min_delta:
            self.best, self.best_epoch, self.stale = value, self.epoch, 0
        else:
            self.stale += 1
        return self.stale >= self.patience

    @property
    def improved(self):
        return self.best_epoch == self.epoch


# --------------------------------------------------------------------- losses


def distill_loss(h_s, h_t, z_s, y, alpha=0.5, beta=0.5):
    """Return ``(total, cls, kd)`` for a batch (or a single sample).

    ``cls`` is the mean binary cross-entropy of ``sigmoid(z_s)`` against ``y``,
    ``kd`` the squared feature distance divided by the feature width and
    averaged over the batch.  ``h_t`` is detached.  ``total`` is formed in
    double precision so that ``total - alpha*cls - beta*kd`` is exact.
    """
    h_s = torch.as_tensor(h_s)
    h_t = torch.as_tensor(h_t, dtype=h_s.dtype).detach()
    z_s = torch.as_tensor(z_s, dtype=h_s.dtype)
    y = torch.as_tensor(y, dtype=z_s.dtype)
    if h_s.shape != h_t.shape:
        raise DimensionMismatch(f"student features {tuple(h_s.shape)} vs teacher {tuple(h_t.shape)}")
    cls = F.binary_cross_entropy_with_logits(z_s.reshape(-1), y.reshape(-1))
    kd = ((h_s - h_t) ** 2).mean()
    total = alpha * cls.double() + beta * kd.double()
    return total, cls, kd


def _bce(z, y):
    return F.binary_cross_entropy_with_logits(z.reshape(-1), y.reshape(-1))


# ------------------------------------------------------------------ the loop


def _tensor(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float32))


def _safe_auc(scores, labels):
    try:
        return compute_auc(scores, labels)
    except SingleClass:
        return float("nan")


def fit_encoder(
    state: EncoderState,
    X_train,
    y_train,
    X_val,
    y_val,
    cfg: TrainConfig,
    teacher_train=None,
    teacher_val=None,
    parameters="all",
    log_path=None,
):
    """Train ``state`` in place and restore its best-validation-loss weights.

    With ``teacher_train``/``teacher_val`` (teacher feature matrices) the
    objective is ``alpha*BCE + beta*KD``; otherwise plain BCE.  ``parameters``
    selects ``"all"`` or ``"head"`` for optimization.  Returns the per-epoch log.
    """
    if not state.trainable:
        raise ValidationError(f"encoder for {state.window_name!r} is frozen")
    distill = teacher_train is not None
    net = state.net
    Xt, yt = _tensor(X_train), _tensor(y_train)
    Xv, yv = _tensor(X_val), _tensor(y_val)
    if Xt.dim() == 4:
        Xt, Xv = Xt[:, None], Xv[:, None]
    Ht = _tensor(teacher_train) if distill else None
    Hv = _tensor(teacher_val) if distill else None

    if parameters == "head":
        for p in net.encoder.parameters():
            p.requires_grad_(False)
        params = list(net.head.parameters())
    else:
        params = list(net.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=tuple(cfg.adam_betas), weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(int(cfg.seed))
    stopper = EarlyStopping(cfg.early_stop_patience, cfg.min_delta)
    best = copy.deepcopy(net.state_dict())
    log, n = [], len(Xt)
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            lr = cosine_lr(cfg.lr, epoch - 1, cfg.epochs)
            for group in opt.param_groups:
                group["lr"] = lr
            net.train()
            if parameters == "head":
                net.encoder.eval()
            sums = np.zeros(3)
            for idx in torch.randperm(n, generator=gen).split(cfg.batch_size):
                h, z = net(Xt[idx])
                if distill:
                    total, cls, kd = distill_loss(h, Ht[idx], z, yt[idx], cfg.alpha, cfg.beta)
                else:
                    cls = _bce(z, yt[idx])
                    kd = torch.zeros((), dtype=cls.dtype)
                    total = cls.double()
                if not torch.isfinite(total):
                    raise Divergence(f"{state.window_name}: non-finite loss at epoch {epoch}")
                opt.zero_grad()
                total.backward()
                opt.step()
                sums += len(idx) * np.array([total.item(), cls.item(), kd.item()])
            train_total, train_cls, train_kd = sums / n

            net.eval()
            with torch.no_grad():
                hv, zv = _batched(net, Xv)
                val_cls = _bce(zv, yv)
                if distill:
                    val_loss, _, val_kd = distill_loss(hv, Hv, zv, yv, cfg.alpha, cfg.beta)
                    val_loss, val_kd = val_loss.item(), val_kd.item()
                else:
                    val_loss, val_kd = val_cls.double().item(), 0.0
            if not math.isfinite(val_loss):
                raise Divergence(f"{state.window_name}: non-finite validation loss at epoch {epoch}")
            stop = stopper.update(val_loss)
            if stopper.improved:
                best = copy.deepcopy(net.state_dict())
            record = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": train_total,
                "train_cls": train_cls,
                "train_kd": train_kd,
                "val_loss": val_loss,
                "val_cls": val_cls.item(),
                "val_kd": val_kd,
                "val_auc": _safe_auc(zv.numpy(), y_val),
                "alpha": cfg.alpha if distill else 1.0,
                "beta": cfg.beta if distill else 0.0,
                "wall_time": time.perf_counter() - started,
            }
            log.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
            logger.debug("%s epoch %d: %s", state.window_name, epoch, record)
            if stop:
                break
    finally:
        if log_fh:
            log_fh.close()
        if parameters == "head":
            for p in net.encoder.parameters():
                p.requires_grad_(True)
    net.load_state_dict(best)
    net.eval()
    state.info = {**state.info, "best_epoch": stopper.best_epoch, "best_val_loss": stopper.best, "epochs_run": len(log)}
    return log


def _batched(net, X, batch_size=32):
    hs, zs = [], []
    for i in range(0, len(X), batch_size):
        h, z = net(X[i : i + batch_size])
        hs.append(h)
        zs.append(z)
    return torch.cat(hs), torch.cat(zs)


# ------------------------------------------------------------- public stages


def _window_arrays(partition: Partition, window):
    if window not in partition.arrays:
        raise ValidationError(f"partition has no data for window {window!r}")
    return partition.arrays[window]


def train_supervised(window, train: TrainPartition, val: ValidationPartition, cfg: TrainConfig, encoder_config: EncoderConfig, log_path=None):
    require(train, TrainPartition, "supervised training")
    require(val, ValidationPartition, "early stopping")
    state = build_encoder(encoder_config, seed=cfg.seed, window_name=window)
    log = fit_encoder(state, _window_arrays(train, window), train.labels, _window_arrays(val, window), val.labels, cfg, log_path=log_path)
    state.provenance = "supervised"
    return state, log


@dataclass(frozen=True)
class TeacherSelection:
    teacher_window: str
    val_auc: dict
    student_windows: tuple

    def to_dict(self):
        return {"teacher_window": self.teacher_window, "val_auc": dict(self.val_auc), "student_windows": list(self.student_windows)}


def select_teacher(val_metrics: dict, order=None) -> TeacherSelection:
    """Arg-max of validation AUC; ties go to the earliest window in ``order``."""
    if not val_metrics:
        raise EmptyMetrics("no validation metrics to select a teacher from")
    names = list(order) if order is not None else list(val_metrics)
    if set(names) != set(val_metrics):
        raise ValidationError("window order does not match the metrics' windows")
    if len(names) < 2:
        raise EmptyMetrics("teacher selection needs at least two windows")
    values = [float(val_metrics[w]) for w in names]
    if not all(math.isfinite(v) for v in values):
        raise ValidationError(f"non-finite validation AUC in {val_metrics}")
    teacher = names[int(np.argmax(values))]  # argmax returns the first maximum
    return TeacherSelection(teacher, {w: float(val_metrics[w]) for w in names}, tuple(w for w in names if w != teacher))


def train_distilled(
    student_window,
    teacher: EncoderState,
    train: TrainPartition,
    val: ValidationPartition,
    cfg: TrainConfig,
    encoder_config: EncoderConfig,
    log_path=None,
):
    """Student on its own window, features pulled toward the frozen teacher's."""
    require(train, TrainPartition, "distillation")
    require(val, ValidationPartition, "early stopping")
    if teacher.trainable or any(p.requires_grad for p in teacher.net.parameters()):
        raise TeacherNotFrozen(f"teacher {teacher.window_name!r} must be frozen before distillation")
    if teacher.config.feature_dim != encoder_config.feature_dim:
        raise DimensionMismatch("teacher and student feature widths differ")
    # frozen, evaluation mode: teacher targets are fixed per patient
    h_train = forward_features(teacher, _window_arrays(train, teacher.window_name))
    h_val = forward_features(teacher, _window_arrays(val, teacher.window_name))
    state = build_encoder(encoder_config, seed=cfg.seed, window_name=student_window)
    log = fit_encoder(
        state,
        _window_arrays(train, student_window),
        train.labels,
        _window_arrays(val, student_window),
        val.labels,
        cfg,
        teacher_train=h_train,
        teacher_val=h_val,
        log_path=log_path,
    )
    state.provenance = "distilled"
    state.info["teacher_window"] = teacher.window_name
    state.info["teacher_hash"] = teacher.parameter_hash()
    return state, log


# -------------------------------------------------------------------- transfer


def transfer_direct(pipeline, target: Partition, n_bootstrap=1000, seed=0):
    """Evaluate a frozen pipeline on a new task without touching any parameter."""
    from .analysis import evaluate

    probs = pipeline.predict_proba(target)
    return evaluate(probs, target.labels, target.patient_ids, n_bootstrap=n_bootstrap, seed=seed)


def transfer_finetune_heads(pipeline, target_train: Partition, target_val: Partition, cfg: TrainConfig, n_bootstrap=1000, seed=0):
    """Refit only each base model's head on the target task.

    Encoders and the meta-learner are left untouched; returns the adapted
    pipeline (a copy) and its report on ``target_val``.
    """
    from .analysis import evaluate

    pipeline.check_windows(target_train)
    pipeline.check_windows(target_val)
    adapted = pipeline.copy()
    for window, state in adapted.base_models.items():
        encoder_hash = state.parameter_hash("encoder")
        state.trainable = True
        for p in state.net.head.parameters():
            p.requires_grad_(True)
        fit_encoder(
            state,
            target_train.arrays[window],
            target_train.labels,
            target_val.arrays[window],
            target_val.labels,
            cfg,
            parameters="head",
        )
        state.freeze()
        state.provenance = f"{state.provenance}+head"
        assert state.parameter_hash("encoder") == encoder_hash
    probs = adapted.predict_proba(target_val)
    return adapted, evaluate(probs, target_val.labels, target_val.patient_ids, n_bootstrap=n_bootstrap, seed=seed)


# ------------------------------------------------------------------ estimators


class WindowClassifier(ClassifierMixin, BaseEstimator):
    """Single-window 3D encoder + logistic head as a scikit-learn classifier.

    ``X`` is an array of windowed, normalized volumes ``(N, T, H, W)``.
    ``transform`` returns the encoder's feature vectors.
    """

    def __init__(self, encoder_config=None, train_config=None, window_name=""):
        self.encoder_config = encoder_config
        self.train_config = train_config
        self.window_name = window_name

    def _configs(self, X):
        cfg = self.train_config or TrainConfig()
        enc = self.encoder_config or EncoderConfig.tiny(*np.shape(X)[-3:])
        return enc, cfg

    def fit(self, X, y, eval_set=None):
        X = check_volumes(X)
        y = check_binary_labels(y, len(X))
        Xv, yv = (X, y) if eval_set is None else (check_volumes(eval_set[0]), check_binary_labels(eval_set[1]))
        enc, cfg = self._configs(X)
        self.classes_ = np.array([0, 1])
        self.state_ = build_encoder(enc, seed=cfg.seed, window_name=self.window_name)
        self.history_ = fit_encoder(self.state_, X, y, Xv, yv, cfg)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "state_")
        p = predict_proba(self.state_, check_volumes(X))
        return np.column_stack([1 - p, p])

    def decision_function(self, X):
        p = self.predict_proba(X)[:, 1]
        return np.log(p) - np.log1p(-p)

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def transform(self, X):
        check_is_fitted(self, "state_")
        return forward_features(self.state_, check_volumes(X))


class DistilledWindowClassifier(WindowClassifier):
    """Student classifier whose features are aligned to a frozen ``teacher``.

    ``fit`` needs the same patients' volumes under the teacher's window as
    ``teacher_X`` (and a third element in ``eval_set`` for validation).
    """

    def __init__(self, teacher=None, encoder_config=None, train_config=None, window_name=""):
        super().__init__(encoder_config, train_config, window_name)
        self.teacher = teacher

    def fit(self, X, y, teacher_X=None, eval_set=None):
        if self.teacher is None or teacher_X is None:
            raise ValidationError("distillation needs a teacher and the teacher-window volumes")
        if self.teacher.trainable:
            raise TeacherNotFrozen("teacher must be frozen")
        X = check_volumes(X)
        y = check_binary_labels(y, len(X))
        if eval_set is None:
            eval_set = (X, y, teacher_X)
        Xv, yv, tXv = check_volumes(eval_set[0]), check_binary_labels(eval_set[1]), eval_set[2]
        enc, cfg = self._configs(X)
        self.classes_ = np.array([0, 1])
        self.state_ = build_encoder(enc, seed=cfg.seed, window_name=self.window_name)
        self.history_ = fit_encoder(
            self.state_,
            X,
            y,
            Xv,
            yv,
            cfg,
            teacher_train=forward_features(self.teacher, check_volumes(teacher_X)),
            teacher_val=forward_features(self.teacher, check_volumes(tXv)),
        )
        self.state_.provenance = "distilled"
        return self


def write_log(log, path):
    path = Path(path)
    path.write_text("".join(json.dumps(r) + "\n" for r in log))
    return path
