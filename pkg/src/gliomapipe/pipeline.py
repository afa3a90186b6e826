"""Five-stage orchestration: preprocess, segment, postprocess, features, survival.

All stage outputs live under one output directory::

    preprocessed/<id>/{<mod>_pp.gpv1, <mod>_hm.gpv1, seg.gpv1, manifest_pp.yaml, manifest_hm.yaml}
    model.ckpt, model.ckpt.last, training.json
    segmentations/<id>.gpv1
    postprocessed/<id>.gpv1, dice.csv
    features.csv, targets.csv
    survival_model.json, survival_predictions.csv
    provenance.json

``_pp`` volumes are z-scored network inputs; ``_hm`` volumes are the
histogram-matched intensities radiomics is computed on. Every file except
``provenance.json`` (which records wall-clock timings) is byte-identical
across runs with the same config and seed.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy
import yaml

from . import __version__
from .errors import ConfigError, EmptyLesionError, GliomaPipeError, StageDependencyError
from .metrics import cohort_summary, dice_report
from .postprocess import binarize_masks, remove_small_components
from .preprocess import DEFAULT_LEVELS, compute_reference_cdf, preprocess_study
from .radiomics import DEFAULT_BIN_WIDTH, FEATURE_NAMES, extract_feature_row
from .survival import GBTParams, bucketize, evaluate_survival, predict_gbt, save_model, train_gbt, load_model
from .training import NetworkConfig, TrainConfig, build_network, load_network, save_network, segment_study, train
from .volume_io import CHANNEL_ORDER, read_segmentation, read_study, save_study, write_segmentation

log = logging.getLogger(__name__)

STAGES = ("preprocess", "segment", "postprocess", "features", "survival")
SEED_ENV = "GLIOMAPIPE_SEED"


@dataclass
class PipelineConfig:
    studies: Path
    output: Path
    reference: Optional[Path] = None
    seed: int = 0
    n_levels: int = DEFAULT_LEVELS
    foreground_only: bool = False
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    min_size: int = 2000
    connectivity: int = 26
    bin_width: float = DEFAULT_BIN_WIDTH
    survival: GBTParams = field(default_factory=GBTParams)

    def __post_init__(self):
        if self.n_levels < 2:
            raise ConfigError("preprocess.n_levels must be at least 2")
        if self.min_size < 0:
            raise ConfigError("postprocess.min_size must be non-negative")
        if self.connectivity not in (6, 26):
            raise ConfigError("postprocess.connectivity must be 6 or 26")
        if not self.bin_width > 0:
            raise ConfigError("radiomics.bin_width must be positive")
        # one seed drives weight init, batch order and tree subsampling
        self.train.seed = self.seed
        self.survival.seed = self.seed

    def as_dict(self) -> dict:
        return {
            "seed": self.seed,
            "paths": {"studies": str(self.studies), "output": str(self.output),
                      "reference": str(self.reference) if self.reference else None},
            "preprocess": {"n_levels": self.n_levels, "foreground_only": self.foreground_only},
            "network": asdict(self.network),
            "train": {**asdict(self.train), "class_weights": list(self.train.class_weights)},
            "postprocess": {"min_size": self.min_size, "connectivity": self.connectivity},
            "radiomics": {"bin_width": self.bin_width},
            "survival": asdict(self.survival),
        }

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_SECTIONS = {"seed", "paths", "preprocess", "network", "train", "postprocess", "radiomics", "survival"}


def _section(doc: dict, name: str, allowed) -> dict:
    sec = doc.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section '{name}' must be a mapping")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    return sec


def config_from_dict(doc: dict, base_dir: Path = Path("."), env=None) -> PipelineConfig:
    """Build a config from parsed YAML; relative paths resolve against ``base_dir``."""
    env = os.environ if env is None else env
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(doc) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    paths = _section(doc, "paths", ("studies", "output", "reference"))
    if "studies" not in paths or "output" not in paths:
        raise ConfigError("paths.studies and paths.output are required")

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base_dir / p

    seed = doc.get("seed", 0)
    if env.get(SEED_ENV):
        seed = env[SEED_ENV]
    try:
        seed = int(seed)
        pre = _section(doc, "preprocess", ("n_levels", "foreground_only"))
        post = _section(doc, "postprocess", ("min_size", "connectivity"))
        rad = _section(doc, "radiomics", ("bin_width",))
        network = NetworkConfig(**_section(doc, "network", [f.name for f in fields(NetworkConfig)]))
        train_cfg = TrainConfig(**_section(doc, "train", [f.name for f in fields(TrainConfig)]))
        gbt = GBTParams(**_section(doc, "survival", [f.name for f in fields(GBTParams)]))
        return PipelineConfig(
            studies=resolve(paths["studies"]),
            output=resolve(paths["output"]),
            reference=resolve(paths["reference"]) if paths.get("reference") else None,
            seed=seed,
            n_levels=int(pre.get("n_levels", DEFAULT_LEVELS)),
            foreground_only=bool(pre.get("foreground_only", False)),
            network=network,
            train=train_cfg,
            min_size=int(post.get("min_size", 2000)),
            connectivity=int(post.get("connectivity", 26)),
            bin_width=float(rad.get("bin_width", DEFAULT_BIN_WIDTH)),
            survival=gbt,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc


def load_config(path, env=None) -> PipelineConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(doc, path.parent, env)


# --------------------------------------------------------------------------- file helpers


def discover_manifests(directory, names=("manifest.yaml",)) -> List[Path]:
    """One manifest per study subdirectory, the first of ``names`` that exists."""
    directory = Path(directory)
    if directory.is_file():
        return [directory]
    if not directory.is_dir():
        raise StageDependencyError(f"study directory {directory} does not exist")
    found = []
    for sub in sorted(p for p in directory.iterdir() if p.is_dir()):
        for name in names:
            if (sub / name).is_file():
                found.append(sub / name)
                break
    return found


def _fmt(x: float) -> str:
    return repr(float(x))


def write_features_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("patient_id",) + FEATURE_NAMES)
        for row in rows:
            w.writerow([row.patient_id] + [_fmt(v) for v in row.values])


def read_features_csv(path) -> Tuple[List[str], np.ndarray, List[str]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            body = [r for r in reader if r]
    except (OSError, StopIteration) as exc:
        raise StageDependencyError(f"cannot read feature table {path}: {exc}") from exc
    ids = [r[0] for r in body]
    X = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), len(header) - 1)
    return ids, X, header[1:]


def write_targets_csv(path, targets: Dict[str, float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("patient_id", "survival_days"))
        for pid, days in targets.items():
            w.writerow((pid, _fmt(days)))


def read_targets_csv(path) -> Dict[str, float]:
    try:
        with open(path, newline="") as fh:
            return {r["patient_id"]: float(r["survival_days"]) for r in csv.DictReader(fh)}
    except (OSError, KeyError) as exc:
        raise StageDependencyError(f"cannot read targets {path}: {exc}") from exc


def write_predictions_csv(path, ids: Sequence[str], days) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("patient_id", "predicted_days", "bucket"))
        for pid, d in zip(ids, days):
            w.writerow((pid, _fmt(d), bucketize(max(float(d), 0.0)).value))


def write_dice_csv(path, reports: Dict[str, object]) -> None:
    """Per-study Dice rows followed by mean/std/median summary rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("patient_id", "whole", "core", "active"))
        for pid, rep in reports.items():
            w.writerow((pid, _fmt(rep.whole), _fmt(rep.core), _fmt(rep.active)))
        summary = cohort_summary(list(reports.values()))
        for stat in ("mean", "std", "median"):
            w.writerow((f"#{stat}",) + tuple(_fmt(summary[r][stat]) for r in ("whole", "core", "active")))


def evaluate_segmentations(pred: Dict[str, Path], truth: Dict[str, Path], empty_policy: str = "one"):
    """Dice reports for every patient present in both mappings, in sorted id order."""
    common = sorted(set(pred) & set(truth))
    if not common:
        raise StageDependencyError("no patient has both a prediction and a ground truth")
    return {pid: dice_report(read_segmentation(pred[pid]), read_segmentation(truth[pid]), empty_policy)
            for pid in common}


# --------------------------------------------------------------------------- stages


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.output)

    # paths
    @property
    def preprocessed(self) -> Path:
        return self.out / "preprocessed"

    @property
    def checkpoint(self) -> Path:
        return self.out / "model.ckpt"

    def _need(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise StageDependencyError(f"{path} is missing; run the '{stage}' stage first")
        return path

    def _preprocessed_manifests(self, kind: str) -> List[Path]:
        found = discover_manifests(self._need(self.preprocessed, "preprocess"), (f"manifest_{kind}.yaml",))
        if not found:
            raise StageDependencyError(f"no preprocessed studies under {self.preprocessed}")
        return found

    def _seg_files(self, sub: str, stage: str) -> Dict[str, Path]:
        files = sorted(self._need(self.out / sub, stage).glob("*.gpv1"))
        if not files:
            raise StageDependencyError(f"{self.out / sub} holds no segmentations; run the '{stage}' stage first")
        return {f.stem: f for f in files}

    # 1
    def preprocess(self) -> None:
        manifests = discover_manifests(self.cfg.studies)
        if not manifests:
            raise StageDependencyError(f"no study manifests under {self.cfg.studies}")
        ref_study = read_study(self.cfg.reference or manifests[0], require_all=True)
        refs = {m: compute_reference_cdf(ref_study.volumes[m], self.cfg.n_levels) for m in CHANNEL_ORDER}
        seen = set()
        for manifest in manifests:
            study = read_study(manifest, require_all=True)
            if study.patient_id in seen:
                raise ConfigError(f"duplicate patient id {study.patient_id}")
            seen.add(study.patient_id)
            matched, normalized = preprocess_study(study, refs, self.cfg.n_levels, self.cfg.foreground_only)
            target = self.preprocessed / study.patient_id
            save_study(normalized, target, "_pp", "manifest_pp.yaml")
            save_study(matched, target, "_hm", "manifest_hm.yaml")
            log.info("preprocessed %s", study.patient_id)

    # 2a
    def train(self) -> None:
        studies = [read_study(m, require_all=True) for m in self._preprocessed_manifests("pp")]
        net = build_network(self.cfg.network, seed=self.cfg.seed)
        report = train(net, studies, self.cfg.train, checkpoint_path=self.checkpoint)
        doc = {"epoch_losses": report.epoch_losses, "class_accuracy": report.class_accuracy,
               "best_epoch": report.best_epoch, "n_slices": report.n_slices}
        (self.out / "training.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    # 2b
    def segment(self) -> None:
        net, _, _ = load_network(self._need(self.checkpoint, "segment"))
        target = self.out / "segmentations"
        target.mkdir(parents=True, exist_ok=True)
        for manifest in self._preprocessed_manifests("pp"):
            study = read_study(manifest, require_all=True)
            write_segmentation(segment_study(net, study), target / f"{study.patient_id}.gpv1")

    # 3
    def postprocess(self) -> None:
        target = self.out / "postprocessed"
        target.mkdir(parents=True, exist_ok=True)
        for pid, path in self._seg_files("segmentations", "segment").items():
            cleaned = remove_small_components(read_segmentation(path), self.cfg.min_size, self.cfg.connectivity)
            write_segmentation(cleaned, target / f"{pid}.gpv1")
        truth = self._truth_files()
        if truth:
            reports = evaluate_segmentations(self._seg_files("postprocessed", "postprocess"), truth)
            write_dice_csv(self.out / "dice.csv", reports)

    def _truth_files(self) -> Dict[str, Path]:
        files = {}
        for manifest in self._preprocessed_manifests("pp"):
            seg = manifest.parent / "seg.gpv1"
            if seg.exists():
                files[manifest.parent.name] = seg
        return files

    # 4
    def features(self) -> None:
        segs = self._seg_files("postprocessed", "postprocess")
        rows, targets = [], {}
        for manifest in self._preprocessed_manifests("hm"):
            study = read_study(manifest)
            if study.patient_id not in segs:
                raise StageDependencyError(f"no post-processed segmentation for {study.patient_id}")
            masks = binarize_masks(read_segmentation(segs[study.patient_id]))
            try:
                rows.append(extract_feature_row(study, masks, bin_width=self.cfg.bin_width))
            except EmptyLesionError:
                log.warning("%s: no lesion left after post-processing; row skipped", study.patient_id)
                continue
            if study.survival_days is not None:
                targets[study.patient_id] = study.survival_days
        write_features_csv(self.out / "features.csv", rows)
        write_targets_csv(self.out / "targets.csv", targets)

    # 5
    def survival(self) -> None:
        ids, X, names = read_features_csv(self._need(self.out / "features.csv", "features"))
        targets = read_targets_csv(self._need(self.out / "targets.csv", "features"))
        known = [i for i, pid in enumerate(ids) if pid in targets]
        model = train_gbt(X[known], [targets[ids[i]] for i in known], self.cfg.survival, names)
        save_model(model, self.out / "survival_model.json")
        pred = predict_gbt(model, X)
        write_predictions_csv(self.out / "survival_predictions.csv", ids, pred)
        metrics = evaluate_survival(pred[known], np.array([targets[ids[i]] for i in known]))
        metrics = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in metrics.items()}
        (self.out / "survival_training_metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")


def _versions() -> dict:
    return {"gliomapipe": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "pyyaml": yaml.__version__}


def check_stages(stages: Sequence[str]) -> List[str]:
    stages = list(stages)
    unknown = [s for s in stages if s not in STAGES]
    if unknown or not stages:
        raise ConfigError(f"stages must be drawn from {STAGES}, got {stages}")
    order = [STAGES.index(s) for s in stages]
    if order != sorted(set(order)):
        raise ConfigError("stages must be unique and listed in pipeline order")
    return stages


def run_pipeline(cfg: PipelineConfig, stages: Sequence[str] = STAGES) -> dict:
    """Run ``stages`` in order and write ``provenance.json``; returns the provenance record."""
    stages = check_stages(stages)
    pipe = Pipeline(cfg)
    pipe.out.mkdir(parents=True, exist_ok=True)
    actions = {
        "preprocess": [pipe.preprocess],
        "segment": [pipe.train, pipe.segment],
        "postprocess": [pipe.postprocess],
        "features": [pipe.features],
        "survival": [pipe.survival],
    }
    timings = []
    for stage in stages:
        start = time.perf_counter()
        for action in actions[stage]:
            action()
        timings.append({"stage": stage, "seconds": round(time.perf_counter() - start, 3)})
        log.info("stage %s done in %.1f s", stage, timings[-1]["seconds"])
    record = {"config_hash": cfg.digest(), "seed": cfg.seed, "versions": _versions(),
              "stages": timings, "config": cfg.as_dict()}
    (pipe.out / "provenance.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    return record


__all__ = [
    "GliomaPipeError",
    "Pipeline",
    "PipelineConfig",
    "STAGES",
    "check_stages",
    "config_from_dict",
    "discover_manifests",
    "evaluate_segmentations",
    "load_config",
    "load_model",
    "read_features_csv",
    "read_targets_csv",
    "run_pipeline",
    "save_network",
    "write_dice_csv",
    "write_features_csv",
    "write_predictions_csv",
]
