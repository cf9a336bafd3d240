"""Input checks shared by the estimators."""

import numpy as np

from .exceptions import DegenerateLabels, LengthMismatch, ShapeMismatch, ValidationError


def check_volumes(X):
    """Return ``X`` as float32 ``(N, T, H, W)``; a leading channel axis of 1 is dropped."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 5 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 4:
        raise ShapeMismatch(f"expected volumes of shape (N, T, H, W), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("volumes contain non-finite values")
    return X


def check_binary_labels(y, n=None, both_classes=False):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValidationError(f"labels must be 1-D, got shape {y.shape}")
    if n is not None and len(y) != n:
        raise LengthMismatch(f"{len(y)} labels for {n} samples")
    if not np.all(np.isin(y, (0, 1))):
        raise ValidationError("labels must be 0 or 1")
    if both_classes and len(np.unique(y)) < 2:
        raise DegenerateLabels("both classes must be present")
    return y.astype(np.int64)


def check_probabilities(P, n_columns=None):
    P = np.asarray(P, dtype=np.float64)
    if P.ndim == 1:
        P = P[None, :]
    if P.ndim != 2:
        raise ValidationError(f"probability matrix must be 2-D, got shape {P.shape}")
    if n_columns is not None and P.shape[1] != n_columns:
        from .exceptions import DimensionMismatch

        raise DimensionMismatch(f"expected {n_columns} columns, got {P.shape[1]}")
    if not np.all(np.isfinite(P)) or P.min(initial=0) < 0 or P.max(initial=0) > 1:
        raise ValidationError("probabilities must be finite and inside [0, 1]")
    return P
