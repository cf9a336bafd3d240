"""Experiment lifecycle: preprocess -> baselines -> teacher -> distill -> ensembles -> transfer -> analysis.

Every stage records the hashes of what it consumed and produced in
``manifest.json``; a stage (or a single checkpoint within a stage) is
skipped when its recorded outputs are on disk with matching hashes and its
inputs have not changed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import analysis as an
from .config import ExperimentConfig, derive_seed
from .ensemble import EnsemblePipeline, MetaLearner, build_pipelines
from .exceptions import StageFailure, ValidationError, XWDError
from .ingestion import (
    HUVolume,
    generate_phantoms,
    load_series,
    orient,
    phantom_to_series,
    preprocess_volume,
    read_vol,
    split_patients,
    to_hu,
    write_series,
    write_vol,
)
from .model import file_hash, load_checkpoint, predict_proba, save_checkpoint
from .partitions import ROLES, Partition, TestPartition, TrainPartition, ValidationPartition
from .training import select_teacher, train_distilled, train_supervised, transfer_direct, transfer_finetune_heads
from .windowing import NormStats, WindowNormalizer, normalize, window_volume

logger = logging.getLogger(__name__)

STAGES = ("preprocess", "baselines", "select_teacher", "distill", "ensemble", "transfer", "analyze")
REQUIRES = {
    "preprocess": (),
    "baselines": ("preprocess",),
    "select_teacher": ("baselines",),
    "distill": ("select_teacher",),
    "ensemble": ("distill",),
    "transfer": ("ensemble",),
    "analyze": ("ensemble",),
}


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _canon(obj):
    # tuples come back from JSON as lists; compare like with like
    return json.loads(json.dumps(obj, sort_keys=True))


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def load_volumes(cfg: ExperimentConfig, source=None, path=None, seed_name="phantom"):
    """HU volumes from the configured phantom spec or series directory."""
    source = source or cfg.data_source
    if source == "phantom":
        spec = replace(cfg.phantom, rng_seed=derive_seed(cfg.seed, f"{seed_name}/{cfg.phantom.rng_seed}"))
        return generate_phantoms(spec)
    root = Path(path or cfg.data_path)
    if not root.is_dir():
        raise ValidationError(f"series root {root} does not exist")
    volumes = []
    for d in sorted(p for p in root.iterdir() if (p / "series.json").is_file()):
        vol = to_hu(orient(load_series(d)))
        if vol.label not in (0, 1):
            raise ValidationError(f"series {d} has no binary label")
        volumes.append(vol)
    if not volumes:
        raise ValidationError(f"no series directories under {root}")
    return volumes


class Experiment:
    """One configured experiment bound to its output directory."""

    def __init__(self, config: ExperimentConfig):
        if not config.output_dir:
            raise ValidationError("output_dir is not set")
        self.cfg = config
        self.root = Path(config.output_dir).resolve()
        self.trained = []  # (kind, window) for every model trained in this process
        self.manifest = None

    # ------------------------------------------------------------ manifest

    @property
    def manifest_path(self):
        return self.root / "manifest.json"

    def _load_manifest(self):
        if self.manifest_path.is_file():
            m = json.loads(self.manifest_path.read_text())
            if m.get("config_hash") != self.cfg.hash():
                raise ValidationError(f"{self.root} belongs to a different configuration; choose another output_dir")
            return m
        return {
            "schema_version": 1,
            "config_hash": self.cfg.hash(),
            "config": {k: v for k, v in self.cfg.to_dict().items() if k != "output_dir"},
            "stages": {},
            "checkpoints": {},
            "events": [],
        }

    def _save_manifest(self):
        _write_json(self.manifest_path, self.manifest)

    def _event(self, stage, action, item=None):
        ev = {"time": time.strftime("%Y-%m-%dT%H:%M:%S"), "stage": stage, "action": action}
        if item:
            ev["item"] = item
        self.manifest["events"].append(ev)

    def _rel(self, path):
        return str(Path(path).resolve().relative_to(self.root))

    def _fresh(self, record, inputs):
        if not record or record.get("inputs") != _canon(inputs):
            return False
        return all((self.root / rel).is_file() and file_hash(self.root / rel) == h for rel, h in record.get("outputs", {}).items())

    def _outputs(self, paths):
        return {self._rel(p): file_hash(p) for p in paths}

    def _require(self, stage):
        for dep in REQUIRES[stage]:
            if self.manifest["stages"].get(dep, {}).get("status") != "done":
                raise StageFailure(stage, f"requires stage '{dep}' to have completed first")

    def _done(self, stage, inputs, outputs, **details):
        self.manifest["stages"][stage] = {"status": "done", "inputs": _canon(inputs), "outputs": outputs, **details}
        self._event(stage, "ran")
        self._save_manifest()

    # ------------------------------------------------------------- running

    def run(self, stages=STAGES):
        """Run ``stages`` in order under the directory lock; returns the manifest."""
        self.root.mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(self.root / ".lock"))
        try:
            lock.acquire(timeout=0)
        except Timeout:
            raise StageFailure("lock", f"{self.root} is in use by another process") from None
        try:
            self.manifest = self._load_manifest()
            for stage in stages:
                self._require(stage)
                try:
                    getattr(self, f"stage_{stage}")()
                except StageFailure:
                    raise
                except XWDError as exc:
                    raise StageFailure(stage, str(exc)) from exc
            self._save_manifest()
            return self.manifest
        finally:
            lock.release()

    # ---------------------------------------------------------- preprocess

    def _data_digest(self):
        return self.manifest["stages"]["preprocess"]["digest"]

    def stage_preprocess(self):
        cfg = self.cfg
        inputs = {"config": cfg.hash()}
        record = self.manifest["stages"].get("preprocess")
        if self._fresh(record, inputs) and self._volumes_intact(record):
            self._event("preprocess", "skipped")
            return
        volumes = load_volumes(cfg)
        split = split_patients(volumes, cfg.split_fractions, derive_seed(cfg.seed, "split"))
        stacks = {v.patient_id: window_volume(preprocess_volume(v, cfg.sampling, cfg.out_hw), cfg.windows) for v in volumes}
        parts = {role: ROLES[role].from_stacks([stacks[p] for p in getattr(split, role)]) for role in ROLES}
        normalizer = WindowNormalizer(cfg.windows).fit(parts["train"])

        data_dir = self.root / "data"
        data_dir.mkdir(parents=True, exist_ok=True)
        vol_hashes = {}
        for role, part in parts.items():
            for stack in normalizer.transform(part).stacks():
                for w, arr in stack.arrays.items():
                    p = write_vol(data_dir / f"{stack.patient_id}.{w}.vol", arr)
                    vol_hashes[p.name] = file_hash(p)
        labels = {v.patient_id: int(v.label) for v in volumes}
        stats = {w: s.to_dict() for w, s in normalizer.stats_.items()}
        windows = {"windows": cfg.windows.to_list(), "stats": stats}
        written = [
            _write_json(data_dir / "split.json", split.to_dict()),
            _write_json(data_dir / "labels.json", labels),
            _write_json(data_dir / "windows.json", windows),
        ]
        self._done("preprocess", inputs, self._outputs(written), digest=_digest(vol_hashes), volumes=vol_hashes)

    def _volumes_intact(self, record):
        data_dir = self.root / "data"
        return all((data_dir / n).is_file() and file_hash(data_dir / n) == h for n, h in record.get("volumes", {}).items())

    def norm_stats(self):
        meta = json.loads((self.root / "data" / "windows.json").read_text())
        return {w: NormStats(**s) for w, s in meta["stats"].items()}

    def partitions(self):
        """Normalized train/val/test partitions read back from disk."""
        data_dir = self.root / "data"
        split = json.loads((data_dir / "split.json").read_text())
        labels = json.loads((data_dir / "labels.json").read_text())
        out = {}
        for role, cls in ROLES.items():
            ids = split[role]
            arrays = {w: np.stack([read_vol(data_dir / f"{p}.{w}.vol") for p in ids]) for w in self.cfg.windows.names}
            out[role] = cls(ids, [labels[p] for p in ids], arrays)
        return out

    # ----------------------------------------------------------- baselines

    def _checkpoint_path(self, kind, window):
        return self.root / "models" / kind / f"{window}.xwck"

    def _train_item(self, kind, window, inputs, train_fn):
        key = f"{kind}/{window}"
        path = self._checkpoint_path(kind, window)
        inputs = _canon(inputs)
        rec = self.manifest["checkpoints"].get(key)
        if rec and rec.get("inputs") == inputs and path.is_file() and file_hash(path) == rec["hash"]:
            self._event(kind, "skipped", window)
            return rec
        state, log = train_fn()
        stats = self.norm_stats()
        state.norm_stats = stats.get(window)
        state.freeze()
        log_path = self.root / "logs" / f"{kind}_{window}.jsonl"
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("".join(json.dumps(r) + "\n" for r in log))
        digest = save_checkpoint(state, path)
        self.trained.append((kind, window))
        rec = {"hash": digest, "inputs": inputs, "best_epoch": state.info.get("best_epoch"), "epochs_run": len(log)}
        self.manifest["checkpoints"][key] = rec
        self._event(kind, "trained", window)
        self._save_manifest()
        return rec

    def _train_cfg(self, window):
        return replace(self.cfg.train, seed=derive_seed(self.cfg.seed, f"encoder/{window}"))

    def stage_baselines(self):
        parts = None
        aucs = {}
        for w in self.cfg.windows.names:
            inputs = {"data": self._data_digest(), "train": self.cfg.train.to_dict(), "encoder": self.cfg.encoder.to_dict()}

            def fit(w=w):
                nonlocal parts
                parts = parts or self.partitions()
                return train_supervised(w, parts["train"], parts["val"], self._train_cfg(w), self.cfg.encoder)

            self._train_item("supervised", w, inputs, fit)
        parts = parts or self.partitions()
        for w in self.cfg.windows.names:
            state = load_checkpoint(self._checkpoint_path("supervised", w))
            aucs[w] = an.compute_auc(predict_proba(state, parts["val"].arrays[w]), parts["val"].labels)
        hashes = {w: self.manifest["checkpoints"][f"supervised/{w}"]["hash"] for w in self.cfg.windows.names}
        self._done("baselines", {"data": self._data_digest()}, {}, checkpoints=hashes, val_auc=aucs)

    # ------------------------------------------------------------- teacher

    def stage_select_teacher(self):
        base = self.manifest["stages"]["baselines"]
        inputs = {"checkpoints": base["checkpoints"]}
        if self._fresh(self.manifest["stages"].get("select_teacher"), inputs):
            self._event("select_teacher", "skipped")
            return
        sel = select_teacher(base["val_auc"], self.cfg.windows.names)
        path = _write_json(self.root / "teacher.json", sel.to_dict())
        self.manifest["teacher"] = sel.to_dict()
        self._done("select_teacher", inputs, self._outputs([path]))

    def teacher_window(self):
        return json.loads((self.root / "teacher.json").read_text())["teacher_window"]

    # ------------------------------------------------------------- distill

    def stage_distill(self):
        tw = self.teacher_window()
        teacher_hash = self.manifest["checkpoints"][f"supervised/{tw}"]["hash"]
        teacher_path = self._checkpoint_path("supervised", tw)
        parts = None
        students = [w for w in self.cfg.windows.names if w != tw]
        for w in students:
            inputs = {"data": self._data_digest(), "teacher": teacher_hash, "train": self.cfg.train.to_dict()}

            def fit(w=w):
                nonlocal parts
                parts = parts or self.partitions()
                teacher = load_checkpoint(teacher_path)
                out = train_distilled(w, teacher, parts["train"], parts["val"], self._train_cfg(w), self.cfg.encoder)
                if file_hash(teacher_path) != teacher_hash or teacher.parameter_hash() != out[0].info["teacher_hash"]:
                    raise StageFailure("distill", "teacher changed during distillation")
                return out

            self._train_item("distilled", w, inputs, fit)
        hashes = {w: self.manifest["checkpoints"][f"distilled/{w}"]["hash"] for w in students}
        self._done("distill", {"teacher": teacher_hash, "data": self._data_digest()}, {}, checkpoints=hashes, teacher_hash=teacher_hash)

    # ------------------------------------------------------------ ensemble

    def _models(self, kind, windows):
        return {w: load_checkpoint(self._checkpoint_path(kind, w)) for w in windows}

    def pipelines(self):
        """The two frozen pipelines as recorded by the ensemble stage."""
        tw = self.teacher_window()
        names = self.cfg.windows.names
        sup = self._models("supervised", names)
        dist = self._models("distilled", [w for w in names if w != tw])
        out = {}
        for kind in ("supervised", "distilled"):
            meta = json.loads((self.root / "ensembles" / f"{kind}.json").read_text())
            base = sup if kind == "supervised" else {w: (sup[w] if w == tw else dist[w]) for w in names}
            out[kind] = EnsemblePipeline(names, base, MetaLearner.from_dict(meta["meta"]), kind)
        return out

    def stage_ensemble(self):
        inputs = {"supervised": self.manifest["stages"]["baselines"]["checkpoints"], "distilled": self.manifest["stages"]["distill"]["checkpoints"]}
        inputs["l2_strength"] = self.cfg.l2_strength
        if self._fresh(self.manifest["stages"].get("ensemble"), inputs):
            self._event("ensemble", "skipped")
            return
        tw = self.teacher_window()
        names = self.cfg.windows.names
        sup = self._models("supervised", names)
        dist = self._models("distilled", [w for w in names if w != tw])
        parts = self.partitions()
        pipes = build_pipelines(sup[tw], sup, dist, parts["val"], names, self.cfg.l2_strength)
        written = []
        val_auc = {}
        for pipe in pipes:
            val_auc[pipe.provenance] = an.compute_auc(pipe.predict_proba(parts["val"]), parts["val"].labels)
            written.append(_write_json(self.root / "ensembles" / f"{pipe.provenance}.json", pipe.describe()))
        self._done("ensemble", inputs, self._outputs(written), val_auc=val_auc)

    # ------------------------------------------------------------ transfer

    def transfer_partitions(self):
        """Target-task train/val partitions, windowed with the source statistics."""
        cfg = self.cfg
        if cfg.transfer.source == "phantom_flip":
            spec = replace(cfg.phantom, n_patients=cfg.transfer.n_patients)
            vols = load_volumes(replace(cfg, phantom=spec), "phantom", seed_name="transfer")
            vols = [HUVolume(v.voxels, "t" + v.patient_id, 1 - v.label, v.meta) for v in vols]
        else:
            vols = load_volumes(cfg, "series", cfg.transfer.path)
        _, f_val = cfg.transfer.fractions
        order = np.random.default_rng(derive_seed(cfg.seed, "transfer/split")).permutation(len(vols))
        n_val = int(round(f_val * len(vols)))
        if n_val < 1 or n_val >= len(vols):
            raise ValidationError("transfer fractions leave an empty partition")
        stats = self.norm_stats()
        stacks = [normalize(window_volume(preprocess_volume(vols[i], cfg.sampling, cfg.out_hw), cfg.windows), stats) for i in order]
        return TrainPartition.from_stacks(stacks[n_val:]), ValidationPartition.from_stacks(stacks[:n_val])

    def stage_transfer(self):
        inputs = {"ensemble": self.manifest["stages"]["ensemble"]["outputs"], "transfer": self.cfg.to_dict()["transfer"]}
        if not self.cfg.transfer.enabled:
            self._done("transfer", inputs, {}, skipped=True)
            return
        if self._fresh(self.manifest["stages"].get("transfer"), inputs):
            self._event("transfer", "skipped")
            return
        target_train, target_val = self.transfer_partitions()
        cfg = replace(self.cfg.train, lr=self.cfg.transfer.lr, seed=derive_seed(self.cfg.seed, "transfer/heads"))
        n_boot, seed = self.cfg.analysis.n_bootstrap, derive_seed(self.cfg.seed, "bootstrap")
        out_dir = self.root / "reports" / "transfer"
        out_dir.mkdir(parents=True, exist_ok=True)
        written, summary = [], {}
        for kind, pipe in self.pipelines().items():
            before = {w: m.parameter_hash() for w, m in pipe.base_models.items()}
            direct = transfer_direct(pipe, target_val, n_boot, seed)
            if {w: m.parameter_hash() for w, m in pipe.base_models.items()} != before:
                raise StageFailure("transfer", "direct transfer modified a base model")
            adapted, tuned = transfer_finetune_heads(pipe, target_train, target_val, cfg, n_boot, seed)
            for mode, rep in (("direct", direct), ("finetune_heads", tuned)):
                written.append(rep.write(out_dir / f"{kind}_{mode}.json", out_dir / f"{kind}_{mode}.csv"))
                written.append(out_dir / f"{kind}_{mode}.csv")
                summary[f"{kind}/{mode}"] = rep.to_dict()["metrics"]["auc"]
            for w, m in adapted.base_models.items():
                written.append(self.root / "models" / "transfer" / kind / f"{w}.xwck")
                save_checkpoint(m, written[-1])
        self._done("transfer", inputs, self._outputs(written), auc=summary)

    # ------------------------------------------------------------- analyze

    def stage_analyze(self):
        inputs = {"ensemble": self.manifest["stages"]["ensemble"]["outputs"], "analysis": self.cfg.to_dict()["analysis"]}
        if self._fresh(self.manifest["stages"].get("analyze"), inputs):
            self._event("analyze", "skipped")
            return
        test = self.partitions()["test"]
        tw = self.teacher_window()
        names = self.cfg.windows.names
        n_boot, seed = self.cfg.analysis.n_bootstrap, derive_seed(self.cfg.seed, "bootstrap")
        rep_dir = self.root / "reports"
        rep_dir.mkdir(parents=True, exist_ok=True)
        written, reports = [], {}

        def record(name, probs):
            rep = an.evaluate(probs, test.labels, test.patient_ids, n_boot, seed)
            written.append(rep.write(rep_dir / f"test_{name}.json", rep_dir / f"test_{name}.csv"))
            written.append(rep_dir / f"test_{name}.csv")
            reports[name] = rep
            return rep

        sup = self._models("supervised", names)
        dist = self._models("distilled", [w for w in names if w != tw])
        probs = {}
        for w in names:
            probs[("supervised", w)] = predict_proba(sup[w], test.arrays[w])
            record(f"supervised_{w}", probs[("supervised", w)])
        for w, m in dist.items():
            probs[("distilled", w)] = predict_proba(m, test.arrays[w])
            record(f"distilled_{w}", probs[("distilled", w)])
        for kind, pipe in self.pipelines().items():
            record(f"ensemble_{kind}", pipe.predict_proba(test))

        comparisons = {}
        for w in dist:
            a = an.true_class_probability(probs[("distilled", w)], test.labels)
            b = an.true_class_probability(probs[("supervised", w)], test.labels)
            t, p = an.paired_test(a, b)
            venn = an.venn_agreement(reports[f"supervised_{w}"].per_sample_correct, reports[f"distilled_{w}"].per_sample_correct)
            comparisons[w] = {
                "auc_supervised": reports[f"supervised_{w}"].auc,
                "auc_distilled": reports[f"distilled_{w}"].auc,
                "paired_t": {"statistic": t, "p_value": p},
                "venn": venn.to_dict(),
            }

        att_dir = rep_dir / "attention"
        att_dir.mkdir(exist_ok=True)
        for i in range(min(self.cfg.analysis.gradcam_cases, len(test))):
            pid = test.patient_ids[i]
            for w in dist:
                for kind, model in (("supervised", sup[w]), ("distilled", dist[w])):
                    amap = an.grad_cam(model, test.arrays[w][i])
                    written.append(write_vol(att_dir / f"{pid}.{w}.{kind}.vol", amap.heatmap))

        summary = {
            "teacher_window": tw,
            "models": {name: rep.to_dict()["metrics"] for name, rep in reports.items()},
            "student_comparisons": comparisons,
            "n_test": len(test),
        }
        written.append(_write_json(rep_dir / "summary.json", summary))
        self._done("analyze", inputs, self._outputs(written), auc={k: r.auc for k, r in reports.items()})


def make_phantom_series(cfg: ExperimentConfig, target=None):
    """Write the configured phantom cohort as series directories."""
    target = Path(target or Path(cfg.output_dir) / "phantoms")
    written = []
    for vol in load_volumes(cfg, "phantom"):
        written.append(write_series(phantom_to_series(vol), target / vol.patient_id))
    return written
