"""CT window transforms and train-set z-score normalization."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import EmptyTrainingSet, ValidationError
from .ingestion import HUVolume
from .partitions import Partition, TrainPartition, WindowedStack, require

EPSILON = 1e-8


@dataclass(frozen=True)
class WindowSpec:
    name: str
    width_hu: float
    level_hu: float

    def __post_init__(self):
        if not self.width_hu > 0:
            raise ValidationError(f"window {self.name!r}: width must be positive, got {self.width_hu}")

    @property
    def bounds(self):
        return self.level_hu - self.width_hu / 2.0, self.level_hu + self.width_hu / 2.0


@dataclass(frozen=True)
class WindowSet:
    windows: tuple

    def __post_init__(self):
        object.__setattr__(self, "windows", tuple(self.windows))
        names = self.names
        if len(names) < 2:
            raise ValidationError("a window set needs at least two windows")
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate window names in {names}")

    @property
    def names(self):
        return tuple(w.name for w in self.windows)

    def __iter__(self):
        return iter(self.windows)

    def __len__(self):
        return len(self.windows)

    def __getitem__(self, name):
        for w in self.windows:
            if w.name == name:
                return w
        raise KeyError(name)

    def to_list(self):
        return [asdict(w) for w in self.windows]

    @classmethod
    def from_list(cls, items):
        return cls(tuple(WindowSpec(d["name"], float(d["width_hu"]), float(d["level_hu"])) for d in items))


_SHARED = (
    WindowSpec("lung", 1500.0, -600.0),
    WindowSpec("mediastinal", 350.0, 20.0),
    WindowSpec("hrct", 2000.0, -600.0),
    WindowSpec("zero", 1500.0, 0.0),
)


def default_window_set(task_mode: str) -> WindowSet:
    if task_mode == "diffuse":
        return WindowSet(_SHARED + (WindowSpec("bone", 1000.0, 250.0),))
    if task_mode == "focal":
        return WindowSet(_SHARED + (WindowSpec("pe", 700.0, 100.0),))
    raise ValidationError(f"unknown task_mode {task_mode!r}")


def apply_window(volume, spec: WindowSpec) -> np.ndarray:
    """Clip to ``[L - W/2, L + W/2]`` and map linearly onto ``[0, 1]``."""
    hu = volume.voxels if isinstance(volume, HUVolume) else np.asarray(volume, dtype=np.float64)
    lo, hi = spec.bounds
    # dividing by (hi - lo) rather than W keeps both bounds exact in floating point
    return (np.clip(hu, lo, hi) - lo) / (hi - lo)


def window_volume(volume: HUVolume, windows: WindowSet) -> WindowedStack:
    arrays = {w.name: apply_window(volume, w).astype(np.float32) for w in windows}
    return WindowedStack(volume.patient_id, arrays, volume.label)


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float
    epsilon: float = EPSILON

    def to_dict(self):
        return asdict(self)


def _moments(a):
    a = np.asarray(a, dtype=np.float64).ravel()
    mu = a.mean()
    return a.size, mu, float(((a - mu) ** 2).sum())


def _combine(x, y):
    # pairwise merge of (count, mean, M2), Chan et al.
    n = x[0] + y[0]
    delta = y[1] - x[1]
    mean = x[1] + delta * y[0] / n
    return n, mean, x[2] + y[2] + delta * delta * x[0] * y[0] / n


def fit_norm_stats(train: TrainPartition, window: str) -> NormStats:
    """Global mean and population std of one window over the training pool."""
    require(train, TrainPartition, "normalization statistics")
    if window not in train.arrays or train.arrays[window].size == 0:
        raise EmptyTrainingSet(f"no training voxels for window {window!r}")
    parts = [_moments(v) for v in train.arrays[window]]
    while len(parts) > 1:
        parts = [_combine(parts[i], parts[i + 1]) if i + 1 < len(parts) else parts[i] for i in range(0, len(parts), 2)]
    n, mean, m2 = parts[0]
    return NormStats(float(mean), float(np.sqrt(max(m2, 0.0) / n)))


def normalize(data, stats):
    """Apply ``(x - mu) / (sigma + eps)`` per window.

    ``data`` is a :class:`WindowedStack`, a :class:`Partition` (both stored
    as float32), or a bare array paired with a single :class:`NormStats`
    (returned in float64).
    """
    if isinstance(stats, NormStats):
        return (np.asarray(data, dtype=np.float64) - stats.mean) / (stats.std + stats.epsilon)
    if isinstance(data, WindowedStack):
        arrays = {w: normalize(a, stats[w]).astype(np.float32) for w, a in data.arrays.items()}
        return WindowedStack(data.patient_id, arrays, data.label)
    if isinstance(data, Partition):
        return data.with_arrays({w: normalize(a, stats[w]).astype(np.float32) for w, a in data.arrays.items()})
    raise TypeError(f"cannot normalize {type(data).__name__}")


def denormalize(data, stats: NormStats):
    return np.asarray(data, dtype=np.float64) * (stats.std + stats.epsilon) + stats.mean


class WindowNormalizer(TransformerMixin, BaseEstimator):
    """Per-window z-scoring fitted on a :class:`TrainPartition` only.

    ``transform`` accepts any partition and returns a normalized copy.
    """

    def __init__(self, windows=None):
        self.windows = windows

    def fit(self, X, y=None):
        require(X, TrainPartition, "WindowNormalizer")
        names = self.windows.names if isinstance(self.windows, WindowSet) else (self.windows or X.windows)
        self.stats_ = {w: fit_norm_stats(X, w) for w in names}
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        missing = set(X.windows) - set(self.stats_)
        if missing:
            raise ValidationError(f"no statistics for windows {sorted(missing)}")
        return normalize(X, self.stats_)

    def fit_transform(self, X, y=None):
        return self.fit(X).transform(X)
