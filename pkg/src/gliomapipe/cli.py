"""Command-line entry point: ``gliomapipe <command> ...``.

Each stage command works in two modes. Given only ``--config`` it runs that
stage of the configured pipeline; given explicit file arguments it processes
a single study or table.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import GliomaPipeError
from .pipeline import (
    STAGES,
    Pipeline,
    config_from_dict,
    discover_manifests,
    evaluate_segmentations,
    load_config,
    read_features_csv,
    read_targets_csv,
    run_pipeline,
    write_dice_csv,
    write_features_csv,
    write_predictions_csv,
)
from .postprocess import binarize_masks, remove_small_components
from .preprocess import compute_reference_cdf, preprocess_study
from .radiomics import DEFAULT_BIN_WIDTH, extract_feature_row
from .survival import GBTParams, load_model, predict_gbt, save_model, train_gbt
from .training import NetworkConfig, TrainConfig, build_network, load_network, segment_study, train
from .volume_io import CHANNEL_ORDER, read_segmentation, read_study, save_study, write_segmentation

log = logging.getLogger("gliomapipe")


class UsageError(Exception):
    pass


def _config(args, required=False):
    if args.config is None:
        if required:
            raise UsageError("--config is required here")
        return None
    return load_config(args.config)


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"missing {flags} (or pass only --config to run the pipeline stage)")


def _single_mode(args, *names) -> bool:
    return args.config is None or any(getattr(args, n) is not None for n in names)


# --------------------------------------------------------------------------- commands


def cmd_preprocess(args) -> int:
    if not _single_mode(args, "manifest", "out"):
        run_pipeline(_config(args), ["preprocess"])
        return 0
    _require(args, "manifest", "out")
    cfg = _config(args)
    n_levels = cfg.n_levels if cfg else args.levels
    study = read_study(args.manifest, require_all=True)
    ref = read_study(args.reference or args.manifest, require_all=True)
    refs = {m: compute_reference_cdf(ref.volumes[m], n_levels) for m in CHANNEL_ORDER}
    matched, normalized = preprocess_study(study, refs, n_levels, bool(cfg and cfg.foreground_only))
    out = Path(args.out)
    print(save_study(normalized, out, "_pp", "manifest_pp.yaml"))
    save_study(matched, out, "_hm", "manifest_hm.yaml")
    return 0


def cmd_train(args) -> int:
    if not _single_mode(args, "studies", "out"):
        Pipeline(_config(args)).train()
        return 0
    _require(args, "studies", "out")
    cfg = _config(args)
    network = cfg.network if cfg else NetworkConfig()
    train_cfg = cfg.train if cfg else TrainConfig(epochs=args.epochs or 30, seed=args.seed)
    if args.epochs:
        train_cfg.epochs = args.epochs
    manifests = discover_manifests(args.studies, ("manifest_pp.yaml", "manifest.yaml"))
    if not manifests:
        raise UsageError(f"no study manifests under {args.studies}")
    studies = [read_study(m, require_all=True) for m in manifests]
    net = build_network(network, seed=train_cfg.seed)
    report = train(net, studies, train_cfg, checkpoint_path=args.out)
    for epoch, loss in enumerate(report.epoch_losses, 1):
        print(f"epoch {epoch:3d}  loss {loss:.5f}")
    return 0


def cmd_segment(args) -> int:
    if not _single_mode(args, "ckpt", "manifest", "out"):
        Pipeline(_config(args)).segment()
        return 0
    _require(args, "ckpt", "manifest", "out")
    net, _, _ = load_network(args.ckpt)
    write_segmentation(segment_study(net, read_study(args.manifest, require_all=True)), args.out)
    return 0


def cmd_postprocess(args) -> int:
    if not _single_mode(args, "input", "out"):
        Pipeline(_config(args)).postprocess()
        return 0
    _require(args, "input", "out")
    seg = read_segmentation(args.input)
    write_segmentation(remove_small_components(seg, args.min_size, args.connectivity), args.out)
    return 0


def cmd_features(args) -> int:
    if not _single_mode(args, "manifest", "seg", "out"):
        Pipeline(_config(args)).features()
        return 0
    _require(args, "manifest", "seg", "out")
    study = read_study(args.manifest)
    row = extract_feature_row(study, binarize_masks(read_segmentation(args.seg)), args.age, args.bin_width)
    write_features_csv(args.out, [row])
    return 0


def cmd_survival_train(args) -> int:
    cfg = _config(args)
    if not _single_mode(args, "features", "targets", "out"):
        Pipeline(cfg).survival()
        return 0
    _require(args, "features", "targets", "out")
    ids, X, names = read_features_csv(args.features)
    targets = read_targets_csv(args.targets)
    keep = [i for i, pid in enumerate(ids) if pid in targets]
    params = cfg.survival if cfg else GBTParams()
    model = train_gbt(X[keep], [targets[ids[i]] for i in keep], params, names)
    save_model(model, args.out)
    return 0


def cmd_survival_predict(args) -> int:
    cfg = _config(args)
    if cfg is not None and args.model is None:
        args.model = str(cfg.output / "survival_model.json")
        args.features = args.features or str(cfg.output / "features.csv")
        args.out = args.out or str(cfg.output / "survival_predictions.csv")
    _require(args, "model", "features", "out")
    model = load_model(args.model)
    ids, X, _ = read_features_csv(args.features)
    write_predictions_csv(args.out, ids, predict_gbt(model, X))
    return 0


def _seg_map(directory) -> dict:
    """``<id>.gpv1`` files, or ``<id>/seg.gpv1`` inside study folders."""
    directory = Path(directory)
    found = {p.stem: p for p in directory.glob("*.gpv1")}
    for p in sorted(directory.glob("*/seg.gpv1")):
        found.setdefault(p.parent.name, p)
    return found


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    if cfg is not None and args.pred is None:
        args.pred = str(cfg.output / "postprocessed")
        args.truth = args.truth or str(cfg.output / "preprocessed")
        args.out = args.out or str(cfg.output / "dice.csv")
    _require(args, "pred", "truth", "out")
    reports = evaluate_segmentations(_seg_map(args.pred), _seg_map(args.truth), args.empty_policy)
    write_dice_csv(args.out, reports)
    return 0


def cmd_pipeline(args) -> int:
    cfg = _config(args, required=True)
    stages = args.stages.split(",") if args.stages else list(STAGES)
    record = run_pipeline(cfg, stages)
    for t in record["stages"]:
        print(f"{t['stage']:<12} {t['seconds']:8.1f} s")
    return 0


def cmd_overlay(args) -> int:
    from .overlay import render_overlay
    render_overlay(read_study(args.manifest), read_segmentation(args.seg), args.slice, args.out)
    return 0


def cmd_make_synthetic(args) -> int:
    import yaml

    from .synthetic import make_cohort, write_cohort
    out = Path(args.out)
    studies = make_cohort(args.n, seed=args.seed, dims=tuple(args.dims))
    write_cohort(studies, out / "studies")
    doc = config_from_dict({"paths": {"studies": "studies", "output": "run"}, "seed": args.seed},
                           env={}).as_dict()
    doc["paths"] = {"studies": "studies", "output": "run", "reference": None}
    (out / "pipeline.yaml").write_text(yaml.safe_dump(doc, sort_keys=False))
    print(out / "pipeline.yaml")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gliomapipe", description="Glioma segmentation and survival pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="pipeline config (YAML)")
        p.set_defaults(func=func)
        return p

    p = add("preprocess", cmd_preprocess, "histogram-match and z-score a study")
    p.add_argument("--manifest")
    p.add_argument("--reference", help="reference study manifest (default: the study itself)")
    p.add_argument("--out")
    p.add_argument("--levels", type=int, default=1024)

    p = add("train", cmd_train, "train the segmentation network")
    p.add_argument("--studies", help="directory of preprocessed study folders")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, default=0)

    p = add("segment", cmd_segment, "segment one study with a trained checkpoint")
    p.add_argument("--ckpt")
    p.add_argument("--manifest")
    p.add_argument("--out")

    p = add("postprocess", cmd_postprocess, "drop small connected components")
    p.add_argument("--in", dest="input")
    p.add_argument("--out")
    p.add_argument("--min-size", type=int, default=2000)
    p.add_argument("--connectivity", type=int, choices=(6, 26), default=26)

    p = add("features", cmd_features, "extract the 141-value radiomics row")
    p.add_argument("--manifest")
    p.add_argument("--seg")
    p.add_argument("--out")
    p.add_argument("--age", type=float, help="override the manifest age")
    p.add_argument("--bin-width", type=float, default=DEFAULT_BIN_WIDTH)

    p = add("survival-train", cmd_survival_train, "fit the survival regressor")
    p.add_argument("--features")
    p.add_argument("--targets")
    p.add_argument("--out")

    p = add("survival-predict", cmd_survival_predict, "predict survival days")
    p.add_argument("--model")
    p.add_argument("--features")
    p.add_argument("--out")

    p = add("evaluate", cmd_evaluate, "Dice scores of predictions against ground truth")
    p.add_argument("--pred")
    p.add_argument("--truth")
    p.add_argument("--out")
    p.add_argument("--empty-policy", choices=("one", "nan"), default="one")

    p = add("pipeline", cmd_pipeline, "run pipeline stages in order")
    p.add_argument("--stages", help=f"comma-separated subset of {','.join(STAGES)}")

    p = add("overlay", cmd_overlay, "render a labelled FLAIR slice as PPM")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seg", required=True)
    p.add_argument("--slice", type=int, required=True)
    p.add_argument("--out", required=True)

    p = add("make-synthetic", cmd_make_synthetic, "write a synthetic cohort plus a pipeline config")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=int, nargs=3, default=(64, 64, 24))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gliomapipe {args.command}: {exc}", file=sys.stderr)
        return 2
    except GliomaPipeError as exc:
        print(f"gliomapipe {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
