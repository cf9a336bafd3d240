"""Volume-series loading, HU conversion, slice selection, resizing and phantoms.

The on-disk series layout understood by :func:`load_series` is deliberately
minimal: one directory per patient holding ``series.json`` plus one
uncompressed ``.npy`` pixel array per slice::

    {
      "patient_id": "p001",
      "label": 1,
      "rescale_slope": 1.0,
      "rescale_intercept": -1024.0,
      "slices": [{"file": "0000.npy", "position": -120.5}, ...]
    }

``rescale_slope``/``rescale_intercept`` may also be given per slice entry,
in which case they override the series-level values.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .exceptions import (
    CorruptVolume,
    EmptyAfterTrim,
    EmptyPartition,
    InconsistentShape,
    InvalidBand,
    MissingMetadata,
    TooFewSlices,
    ValidationError,
)

HU_MIN, HU_MAX = -1024.0, 3071.0
VOL_MAGIC = b"XWD1"


@dataclass
class RawSeries:
    slices: list
    positions: np.ndarray
    rescale_slope: np.ndarray | float
    rescale_intercept: np.ndarray | float
    patient_id: str
    label: int | None = None

    def __post_init__(self):
        if len(self.slices) != len(self.positions):
            raise InconsistentShape("one position is required per slice")
        shapes = {np.shape(s) for s in self.slices}
        if len(shapes) > 1:
            raise InconsistentShape(f"mixed slice shapes {sorted(shapes)}")
        self.positions = np.asarray(self.positions, dtype=np.float64)


@dataclass
class HUVolume:
    voxels: np.ndarray
    patient_id: str
    label: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_slices(self):
        return self.voxels.shape[0]

    def replace(self, voxels, **meta):
        return HUVolume(voxels, self.patient_id, self.label, {**self.meta, **meta})


@dataclass(frozen=True)
class SamplingPlan:
    task_mode: str = "diffuse"
    target_slices: int = 32
    region_start_fraction: float = 0.40
    trim_fraction: float = 0.10

    def __post_init__(self):
        if self.task_mode not in ("diffuse", "focal"):
            raise ValidationError(f"unknown task_mode {self.task_mode!r}")
        if self.target_slices < 1:
            raise ValidationError("target_slices must be positive")
        if not 0.0 <= self.trim_fraction < 0.5:
            raise ValidationError("trim_fraction must lie in [0, 0.5)")
        if not 0.0 <= self.region_start_fraction < 1.0:
            raise ValidationError("region_start_fraction must lie in [0, 1)")

    @classmethod
    def for_task(cls, task_mode, target_slices=None):
        """Paper defaults: 32 slices from 40% onward (diffuse), 128 over the whole lung (focal)."""
        if task_mode == "diffuse":
            return cls("diffuse", target_slices or 32, 0.40, 0.10)
        return cls("focal", target_slices or 128, 0.0, 0.10)


@dataclass(frozen=True)
class PhantomSpec:
    """Synthetic cohort where the class signal is a texture confined to one HU band.

    ``background_tissue_mix`` lists ``(mean_hu, std_hu, volume_fraction)``;
    tissues are laid out as smooth blobs by thresholding a random field at
    the fraction quantiles.  Positives get a textured lesion painted over
    the tissue whose mean lies inside ``signal_band``.
    """

    n_patients: int = 40
    class_balance: float = 0.5
    signal_band: tuple = (-155.0, 195.0)
    signal_texture_amplitude: float = 120.0
    background_tissue_mix: tuple = (
        (-1000.0, 10.0, 0.20),
        (-850.0, 90.0, 0.45),
        (40.0, 12.0, 0.30),
        (450.0, 120.0, 0.05),
    )
    rng_seed: int = 0
    shape: tuple = (12, 64, 64)
    lesion_count: int = 4
    lesion_radius: float = 10.0
    decoy_count: int = 4
    label_noise: float = 0.0

    def __post_init__(self):
        lo, hi = self.signal_band
        if not (HU_MIN <= lo < hi <= HU_MAX):
            raise InvalidBand(f"signal band {self.signal_band} is not inside [{HU_MIN}, {HU_MAX}]")
        total = sum(f for _, _, f in self.background_tissue_mix)
        if abs(total - 1.0) > 1e-6:
            raise ValidationError(f"tissue volume fractions sum to {total}, expected 1")
        if not 0.0 < self.class_balance < 1.0:
            raise ValidationError("class_balance must lie in (0, 1)")
        if self.n_patients < 1:
            raise ValidationError("n_patients must be positive")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValidationError("label_noise must lie in [0, 0.5)")


# --------------------------------------------------------------------- reading


def _slice_value(entry, series_meta, key):
    value = entry.get(key, series_meta.get(key))
    if value is None:
        raise MissingMetadata(f"slice {entry.get('file')!r} has no {key}")
    return float(value)


def load_series(source) -> RawSeries:
    """Read a series directory and return its slices ordered by ascending position."""
    source = Path(source)
    meta_path = source / "series.json"
    if not meta_path.is_file():
        raise MissingMetadata(f"{meta_path} not found")
    meta = json.loads(meta_path.read_text())
    entries = meta.get("slices") or []
    if len(entries) < 3:
        raise TooFewSlices(f"{source} holds {len(entries)} slices, need at least 3")

    slices, positions, slopes, intercepts = [], [], [], []
    for entry in entries:
        if "position" not in entry or entry["position"] is None:
            raise MissingMetadata(f"slice {entry.get('file')!r} has no position")
        slices.append(np.load(source / entry["file"], allow_pickle=False))
        positions.append(float(entry["position"]))
        slopes.append(_slice_value(entry, meta, "rescale_slope"))
        intercepts.append(_slice_value(entry, meta, "rescale_intercept"))

    shapes = {s.shape for s in slices}
    if len(shapes) > 1 or any(len(s) != 2 for s in shapes):
        raise InconsistentShape(f"{source}: slice shapes {sorted(shapes)}")

    order = np.argsort(positions, kind="stable")
    slopes, intercepts = np.asarray(slopes)[order], np.asarray(intercepts)[order]
    return RawSeries(
        slices=[slices[i] for i in order],
        positions=np.asarray(positions)[order],
        rescale_slope=slopes[0] if np.all(slopes == slopes[0]) else slopes,
        rescale_intercept=intercepts[0] if np.all(intercepts == intercepts[0]) else intercepts,
        patient_id=str(meta.get("patient_id", source.name)),
        label=meta.get("label"),
    )


def write_series(series: RawSeries, target) -> Path:
    """Write ``series`` in the layout read by :func:`load_series`."""
    target = Path(target)
    target.mkdir(parents=True, exist_ok=True)
    per_slice = np.ndim(series.rescale_slope) > 0 or np.ndim(series.rescale_intercept) > 0
    slope = np.broadcast_to(series.rescale_slope, (len(series.slices),))
    intercept = np.broadcast_to(series.rescale_intercept, (len(series.slices),))
    entries = []
    for i, (pixels, pos) in enumerate(zip(series.slices, series.positions)):
        name = f"{i:04d}.npy"
        np.save(target / name, np.asarray(pixels), allow_pickle=False)
        entry = {"file": name, "position": float(pos)}
        if per_slice:
            entry.update(rescale_slope=float(slope[i]), rescale_intercept=float(intercept[i]))
        entries.append(entry)
    meta = {"patient_id": series.patient_id, "label": series.label, "slices": entries}
    if not per_slice:
        meta.update(rescale_slope=float(series.rescale_slope), rescale_intercept=float(series.rescale_intercept))
    (target / "series.json").write_text(json.dumps(meta, indent=1))
    return target


def orient(series: RawSeries) -> RawSeries:
    """Sort slices apex to base (ascending position); idempotent."""
    order = np.argsort(series.positions, kind="stable")

    def pick(v):
        return np.asarray(v)[order] if np.ndim(v) else v

    return RawSeries(
        slices=[series.slices[i] for i in order],
        positions=series.positions[order],
        rescale_slope=pick(series.rescale_slope),
        rescale_intercept=pick(series.rescale_intercept),
        patient_id=series.patient_id,
        label=series.label,
    )


def to_hu(series: RawSeries) -> HUVolume:
    pixels = np.stack([np.asarray(s, dtype=np.float64) for s in series.slices])
    slope = np.asarray(series.rescale_slope, dtype=np.float64).reshape(-1, 1, 1)
    intercept = np.asarray(series.rescale_intercept, dtype=np.float64).reshape(-1, 1, 1)
    return HUVolume(pixels * slope + intercept, series.patient_id, series.label)


# ------------------------------------------------------------ slice selection


def sample_indices(n_slices: int, plan: SamplingPlan) -> np.ndarray:
    """Indices of the slices kept by :func:`trim_and_sample`."""
    if n_slices < 1:
        raise EmptyAfterTrim("volume has no slices")
    trim = math.floor(plan.trim_fraction * n_slices)
    kept_lo, kept_hi = trim, n_slices - trim  # half-open
    n_kept = kept_hi - kept_lo
    if n_kept < 1:
        raise EmptyAfterTrim(f"trimming {trim} slices per end leaves nothing of {n_slices}")

    start = kept_lo + math.floor(plan.region_start_fraction * n_kept)
    stop = kept_hi
    T = plan.target_slices
    deficit = T - (stop - start)
    if deficit > 0:
        # grow toward both kept ends; whatever one side cannot absorb goes to the other
        room_lo, room_hi = start - kept_lo, kept_hi - stop
        grow_lo = min(room_lo, math.ceil(deficit / 2))
        grow_hi = min(room_hi, deficit - grow_lo)
        grow_lo = min(room_lo, deficit - grow_hi)
        start, stop = start - grow_lo, stop + grow_hi

    m = stop - start
    k = np.arange(T)
    return start + (k * m) // T


def trim_and_sample(volume: HUVolume, plan: SamplingPlan) -> HUVolume:
    if volume.n_slices < 3:
        raise TooFewSlices(f"volume {volume.patient_id} has {volume.n_slices} slices")
    idx = sample_indices(volume.n_slices, plan)
    return volume.replace(volume.voxels[idx], slice_indices=idx.tolist())


# -------------------------------------------------------------------- resizing


def _axis_weights(n_in, n_out):
    # half-pixel centres, edges clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    return i0, i1, w1


def resize_slices(volume: HUVolume, out_hw) -> HUVolume:
    """Bilinear resampling of every slice to ``out_hw``."""
    H, W = (int(v) for v in out_hw)
    if H < 1 or W < 1:
        raise ValidationError(f"out_hw must be positive, got {out_hw}")
    vox = volume.voxels
    if vox.shape[1:] == (H, W):
        return volume.replace(vox.copy())
    r0, r1, wr = _axis_weights(vox.shape[1], H)
    c0, c1, wc = _axis_weights(vox.shape[2], W)
    rows = vox[:, r0, :] * (1 - wr)[None, :, None] + vox[:, r1, :] * wr[None, :, None]
    out = rows[:, :, c0] * (1 - wc) + rows[:, :, c1] * wc
    return volume.replace(out)


def preprocess_volume(volume: HUVolume, plan: SamplingPlan, out_hw) -> HUVolume:
    return resize_slices(trim_and_sample(volume, plan), out_hw)


# -------------------------------------------------------------------- phantoms


def _unit_field(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _lesion_mask(rng, shape, tissue_mask, count, radius):
    T, H, W = shape
    zz, yy, xx = np.ogrid[:T, :H, :W]
    mask = np.zeros(shape, dtype=bool)
    candidates = np.argwhere(tissue_mask)
    if len(candidates) == 0:
        return mask
    for c in candidates[rng.choice(len(candidates), size=count)]:
        # slices are thick relative to in-plane pixels
        d2 = ((zz - c[0]) / max(radius / 3, 1.0)) ** 2 + ((yy - c[1]) / radius) ** 2 + ((xx - c[2]) / radius) ** 2
        mask |= d2 <= 1.0
    return mask


def _stripes(rng, shape, centre, amplitude):
    period = rng.uniform(3.0, 5.0)
    theta = rng.uniform(0, np.pi)
    _, yy, xx = np.meshgrid(*(np.arange(n) for n in shape), indexing="ij")
    phase = 2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period + rng.uniform(0, 2 * np.pi)
    return centre + amplitude * (np.sign(np.sin(phase)) + 0.25 * rng.standard_normal(shape))


def _render_patient(spec: PhantomSpec, rng, positive):
    shape = tuple(spec.shape)
    layout = _unit_field(rng, shape, (1.0, 5.0, 5.0))
    fractions = np.array([f for _, _, f in spec.background_tissue_mix])
    cuts = np.quantile(layout, np.cumsum(fractions)[:-1])
    tissue = np.searchsorted(cuts, layout)
    noise = _unit_field(rng, shape, (0.5, 0.8, 0.8))

    means = np.array([m for m, _, _ in spec.background_tissue_mix])
    stds = np.array([s for _, s, _ in spec.background_tissue_mix])
    vox = means[tissue] + stds[tissue] * noise

    lo, hi = spec.signal_band
    in_band = np.array([lo < m < hi for m in means])
    band_host = np.isin(tissue, np.flatnonzero(in_band)) if in_band.any() else np.ones(shape, bool)

    if spec.decoy_count:
        # same texture, but hosted by out-of-band tissue and present in both classes
        out_band = np.flatnonzero(~in_band)
        host = np.isin(tissue, out_band) & ~band_host
        decoy = _lesion_mask(rng, shape, host, spec.decoy_count, spec.lesion_radius) & host
        owner = means[tissue]
        texture = _stripes(rng, shape, 0.0, spec.signal_texture_amplitude)
        vox = np.where(decoy, owner + texture, vox)
        # a decoy must never leak into the signal band
        vox = np.where(decoy & (vox > lo) & (vox < hi), np.where(owner < lo, lo, hi), vox)

    signal_mask = np.zeros(shape, dtype=bool)
    if positive:
        signal_mask = _lesion_mask(rng, shape, band_host, spec.lesion_count, spec.lesion_radius)
        centre = means[in_band].mean() if in_band.any() else 0.5 * (lo + hi)
        texture = _stripes(rng, shape, centre, spec.signal_texture_amplitude)
        margin = 1e-3 * (hi - lo)
        vox = np.where(signal_mask, np.clip(texture, lo + margin, hi - margin), vox)
    return np.clip(vox, HU_MIN, HU_MAX), signal_mask


def generate_phantoms(spec: PhantomSpec) -> list[HUVolume]:
    """Deterministic synthetic cohort; ``meta['signal_mask']`` marks lesion voxels."""
    rng = np.random.default_rng(spec.rng_seed)
    n_pos = int(round(spec.class_balance * spec.n_patients))
    labels = np.zeros(spec.n_patients, dtype=int)
    labels[:n_pos] = 1
    rng.shuffle(labels)
    width = len(str(spec.n_patients - 1))
    volumes = []
    for i, y in enumerate(labels):
        child = np.random.default_rng([spec.rng_seed, i])
        vox, mask = _render_patient(spec, child, bool(y))
        observed = int(y)
        if spec.label_noise and child.random() < spec.label_noise:
            observed = 1 - observed
        volumes.append(
            HUVolume(vox, f"ph{spec.rng_seed}_{i:0{width}d}", observed, {"signal_mask": mask, "true_label": int(y)})
        )
    return volumes


def phantom_to_series(volume: HUVolume, slope=1.0, intercept=-1024.0, spacing=1.25) -> RawSeries:
    """Encode an HU phantom as stored integer pixels, the inverse of :func:`to_hu`."""
    pixels = np.rint((volume.voxels - intercept) / slope).astype(np.int16)
    positions = spacing * np.arange(volume.n_slices, dtype=np.float64)
    return RawSeries(list(pixels), positions, slope, intercept, volume.patient_id, volume.label)


# ------------------------------------------------------------------ splitting


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    val: tuple
    test: tuple

    def role_of(self, patient_id):
        for role in ("train", "val", "test"):
            if patient_id in getattr(self, role):
                return role
        raise KeyError(patient_id)

    def to_dict(self):
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}


def split_patients(patients: Sequence, fractions=(0.6, 0.2, 0.2), seed: int = 42) -> DatasetSplit:
    """Random patient-level split.  Validation and test sizes are rounded, train takes the rest."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"fractions must be three nonnegative numbers summing to 1, got {fractions}")
    ids = [p if isinstance(p, str) else p.patient_id for p in patients]
    if len(set(ids)) != len(ids):
        raise ValidationError("patient ids must be unique")
    n = len(ids)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_train = n - n_val - n_test
    for name, size in zip(("train", "val", "test"), (n_train, n_val, n_test)):
        if size <= 0:
            raise EmptyPartition(f"{name} partition would hold {size} patients")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        tuple(shuffled[:n_train]),
        tuple(shuffled[n_train : n_train + n_val]),
        tuple(shuffled[n_train + n_val :]),
    )


# ---------------------------------------------------------------- .vol files


def write_vol(path, array) -> Path:
    array = np.asarray(array)
    if array.ndim != 3:
        raise ValidationError(f".vol arrays are 3-D, got shape {array.shape}")
    path = Path(path)
    header = VOL_MAGIC + struct.pack("<3I", *array.shape)
    path.write_bytes(header + np.ascontiguousarray(array, dtype="<f4").tobytes())
    return path


def read_vol(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != VOL_MAGIC:
        raise CorruptVolume(f"{path}: bad header")
    shape = struct.unpack("<3I", data[4:16])
    expected = 16 + 4 * int(np.prod(shape))
    if len(data) != expected:
        raise CorruptVolume(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(shape).astype(np.float32)
