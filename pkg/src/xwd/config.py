"""Experiment configuration: TOML in, canonical dict and hash out."""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .exceptions import ConfigInvalid, XWDError
from .ingestion import PhantomSpec, SamplingPlan
from .model import EncoderConfig
from .training import TrainConfig
from .windowing import WindowSet, default_window_set

SCHEMA_VERSION = 1
DEFAULT_OUTPUT_ROOT = "xwd-runs"


def derive_seed(root: int, name: str) -> int:
    """Child seed for a named consumer; independent of call order."""
    return int.from_bytes(hashlib.sha256(f"{root}/{name}".encode()).digest()[:4], "little")


@dataclass(frozen=True)
class TransferConfig:
    enabled: bool = True
    source: str = "phantom_flip"
    path: str = ""
    n_patients: int = 60
    fractions: tuple = (0.8, 0.2)
    lr: float = 1e-2


@dataclass(frozen=True)
class AnalysisConfig:
    n_bootstrap: int = 1000
    gradcam_cases: int = 2


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    task_mode: str = "diffuse"
    output_dir: str = ""
    data_source: str = "phantom"
    data_path: str = ""
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    sampling: SamplingPlan = field(default_factory=lambda: SamplingPlan("diffuse", 8, 0.0, 0.10))
    out_hw: tuple = (64, 64)
    windows: WindowSet = field(default_factory=lambda: default_window_set("diffuse"))
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split_fractions: tuple = (0.6, 0.2, 0.2)
    l2_strength: float = 1.0
    transfer: TransferConfig = field(default_factory=TransferConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    # --------------------------------------------------------------- (de)serialize

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "task_mode": self.task_mode,
            "output_dir": self.output_dir,
            "data": {"source": self.data_source, "path": self.data_path, "phantom": _plain(asdict(self.phantom))},
            "sampling": {**_plain(asdict(self.sampling)), "out_hw": list(self.out_hw)},
            "windows": self.windows.to_list(),
            "encoder": _plain(asdict(self.encoder)),
            "train": _plain(asdict(self.train)),
            "split": {"fractions": list(self.split_fractions)},
            "ensemble": {"l2_strength": self.l2_strength},
            "transfer": _plain(asdict(self.transfer)),
            "analysis": _plain(asdict(self.analysis)),
        }

    def hash(self, exclude=("output_dir",)):
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        try:
            version = d.pop("schema_version", SCHEMA_VERSION)
            if version != SCHEMA_VERSION:
                raise ConfigInvalid(f"unsupported schema_version {version}")
            task_mode = d.pop("task_mode", "diffuse")
            seed = int(d.pop("seed", 0))
            data = dict(d.pop("data", {}))
            phantom = _build(PhantomSpec, data.pop("phantom", {}), "data.phantom")
            source, path = data.pop("source", "phantom"), str(data.pop("path", ""))
            _no_leftovers(data, "data")
            if source not in ("phantom", "series"):
                raise ConfigInvalid(f"data.source must be 'phantom' or 'series', got {source!r}")
            if source == "series" and not path:
                raise ConfigInvalid("data.path is required for series data")

            sampling = dict(d.pop("sampling", {}))
            out_hw = tuple(int(v) for v in sampling.pop("out_hw", (64, 64)))
            sampling.setdefault("task_mode", task_mode)
            defaults = {"target_slices": 8, "region_start_fraction": 0.0, "trim_fraction": 0.10}
            plan = _build(SamplingPlan, {**defaults, **sampling}, "sampling")

            windows_raw = d.pop("windows", None)
            windows = WindowSet.from_list(windows_raw) if windows_raw else default_window_set(task_mode)

            enc_raw = dict(d.pop("encoder", {}))
            enc_raw["input_shape"] = (1, plan.target_slices, *out_hw)
            if "stage_channels" in enc_raw and "feature_dim" not in enc_raw:
                enc_raw["feature_dim"] = enc_raw["stage_channels"][-1]
            if "stage_channels" in enc_raw and "blocks_per_stage" not in enc_raw:
                enc_raw["blocks_per_stage"] = [1] * len(enc_raw["stage_channels"])
            encoder = _build(EncoderConfig, enc_raw, "encoder")
            train = _build(TrainConfig, d.pop("train", {}), "train")
            split = dict(d.pop("split", {}))
            fractions = tuple(float(f) for f in split.pop("fractions", (0.6, 0.2, 0.2)))
            _no_leftovers(split, "split")
            ens = dict(d.pop("ensemble", {}))
            l2 = float(ens.pop("l2_strength", 1.0))
            _no_leftovers(ens, "ensemble")
            transfer = _build(TransferConfig, d.pop("transfer", {}), "transfer")
            if transfer.source not in ("phantom_flip", "series"):
                raise ConfigInvalid(f"transfer.source must be 'phantom_flip' or 'series', got {transfer.source!r}")
            analysis = _build(AnalysisConfig, d.pop("analysis", {}), "analysis")
            output_dir = str(d.pop("output_dir", ""))
            _no_leftovers(d, "top level")
        except ConfigInvalid:
            raise
        except (XWDError, TypeError, ValueError) as exc:
            raise ConfigInvalid(str(exc)) from exc
        if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3:
            raise ConfigInvalid(f"split.fractions must be three numbers summing to 1, got {fractions}")
        return cls(seed, task_mode, output_dir, source, path, phantom, plan, out_hw, windows, encoder, train, fractions, l2, transfer, analysis)

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            raw = tomllib.loads(path.read_text())
        except OSError as exc:
            raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigInvalid(f"{path}: {exc}") from exc
        cfg = cls.from_dict(raw)
        if not cfg.output_dir:
            root = os.environ.get("XWD_OUTPUT_DIR", DEFAULT_OUTPUT_ROOT)
            cfg = replace(cfg, output_dir=str(Path(root) / path.stem))
        elif not Path(cfg.output_dir).is_absolute():
            cfg = replace(cfg, output_dir=str((path.parent / cfg.output_dir).resolve()))
        return cfg

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _tuples(obj):
    if isinstance(obj, list):
        return tuple(_tuples(v) for v in obj)
    return obj


def _build(cls, raw, section):
    raw = dict(raw)
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigInvalid(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**{k: _tuples(v) for k, v in raw.items()})
    except (XWDError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"[{section}] {exc}") from exc


def _no_leftovers(d, section):
    if d:
        raise ConfigInvalid(f"unknown keys in [{section}]: {sorted(d)}")
