"""Typed partition handles.

Which statistics may be fitted on which data is enforced by type: norm stats
take a :class:`TrainPartition`, the meta-learner a :class:`ValidationPartition`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import LeakageError, ValidationError


@dataclass
class WindowedStack:
    """One patient's volume under every window, shape ``(T, H, W)`` each."""

    patient_id: str
    arrays: dict
    label: int | None = None

    @property
    def shape(self):
        return next(iter(self.arrays.values())).shape


@dataclass
class Partition:
    role = "any"

    patient_ids: tuple
    labels: np.ndarray
    arrays: dict = field(default_factory=dict)

    def __post_init__(self):
        self.patient_ids = tuple(self.patient_ids)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.patient_ids):
            raise ValidationError("one label is required per patient")
        for name, arr in self.arrays.items():
            if len(arr) != len(self.patient_ids):
                raise ValidationError(f"window {name!r} holds {len(arr)} volumes for {len(self.patient_ids)} patients")

    def __len__(self):
        return len(self.patient_ids)

    @property
    def windows(self):
        return tuple(self.arrays)

    @classmethod
    def from_stacks(cls, stacks):
        stacks = list(stacks)
        if not stacks:
            return cls((), np.zeros(0, dtype=np.int64), {})
        names = list(stacks[0].arrays)
        arrays = {w: np.stack([s.arrays[w] for s in stacks]).astype(np.float32) for w in names}
        labels = [-1 if s.label is None else s.label for s in stacks]
        return cls([s.patient_id for s in stacks], labels, arrays)

    def stacks(self):
        for i, pid in enumerate(self.patient_ids):
            yield WindowedStack(pid, {w: a[i] for w, a in self.arrays.items()}, int(self.labels[i]))

    def with_arrays(self, arrays):
        return type(self)(self.patient_ids, self.labels, arrays)

    def with_labels(self, labels):
        return type(self)(self.patient_ids, labels, self.arrays)

    def as_role(self, cls):
        """Re-tag the same data as another role (e.g. a transfer target's training set)."""
        return cls(self.patient_ids, self.labels, self.arrays)


class TrainPartition(Partition):
    role = "train"


class ValidationPartition(Partition):
    role = "val"


class TestPartition(Partition):
    role = "test"
    __test__ = False  # keep pytest from collecting it


ROLES = {"train": TrainPartition, "val": ValidationPartition, "test": TestPartition}


def require(partition, cls, what):
    if not isinstance(partition, cls):
        got = getattr(partition, "role", type(partition).__name__)
        raise LeakageError(f"{what} must be fitted on the {cls.role} partition, got {got!r}")
    return partition
