"""Gradient-boosted regression trees for overall survival, and survival metrics.

Boosting uses the squared-error objective with second-order leaf weights:
for residual gradients ``g = pred - y`` and hessians ``h = 1`` a leaf gets
``-G / (H + lambda)`` and a split scores

    gain = 1/2 [G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda)] - gamma

Candidate thresholds are midpoints between consecutive distinct values of
each feature; a row goes left when ``x < threshold``.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, InsufficientDataError, InvalidDataError, IoError, ShapeError

MODEL_FORMAT = "gliomapipe-gbt"
MODEL_VERSION = 1

DAYS_PER_MONTH = 365.25 / 12
SHORT_LIMIT_DAYS = 10 * DAYS_PER_MONTH  # 304.375
LONG_LIMIT_DAYS = 15 * DAYS_PER_MONTH  # 456.5625


@dataclass
class GBTParams:
    n_trees: int = 200
    max_depth: int = 3
    learning_rate: float = 0.1
    l2_reg: float = 1.0
    min_split_gain: float = 0.0
    min_child_weight: float = 1.0
    subsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.learning_rate <= 1:
            raise ConfigError("learning_rate must lie in (0, 1]")
        if self.max_depth < 1 or self.n_trees < 0:
            raise ConfigError("max_depth must be >= 1 and n_trees >= 0")
        if self.l2_reg < 0 or self.min_split_gain < 0 or self.min_child_weight < 0:
            raise ConfigError("l2_reg, min_split_gain and min_child_weight must be non-negative")
        if not 0 < self.subsample <= 1:
            raise ConfigError("subsample must lie in (0, 1]")


@dataclass
class Tree:
    """Flat binary tree; node 0 is the root, ``feature == -1`` marks a leaf."""

    feature: List[int] = field(default_factory=list)
    threshold: List[float] = field(default_factory=list)
    left: List[int] = field(default_factory=list)
    right: List[int] = field(default_factory=list)
    value: List[float] = field(default_factory=list)

    def _add(self, feature=-1, threshold=0.0, value=0.0) -> int:
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.feature) - 1

    def depth(self, node: int = 0) -> int:
        if self.feature[node] < 0:
            return 0
        return 1 + max(self.depth(self.left[node]), self.depth(self.right[node]))

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        feature = np.array(self.feature)
        threshold = np.array(self.threshold)
        left, right = np.array(self.left), np.array(self.right)
        active = feature[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            n = node[rows]
            go_left = X[rows, feature[n]] < threshold[n]
            node[rows] = np.where(go_left, left[n], right[n])
            active = feature[node] >= 0
        return np.array(self.value)[node]


@dataclass
class GBTModel:
    base_score: float
    learning_rate: float
    n_features: int
    trees: List[Tree] = field(default_factory=list)
    feature_names: Optional[List[str]] = None
    params: Optional[GBTParams] = None


def _check_rows(rows) -> np.ndarray:
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"feature rows must form a 2-D array, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise InvalidDataError("feature rows contain NaN or Inf")
    return X


def _best_split(X, g, h, idx, params):
    """Return ``(gain, feature, threshold)`` of the best split of rows ``idx``, or None."""
    lam = params.l2_reg
    G = math.fsum(g[idx])
    H = math.fsum(h[idx])
    parent = G * G / (H + lam) if H + lam > 0 else 0.0
    best = None
    for j in range(X.shape[1]):
        xj = X[idx, j]
        # sorting on (x, g, h) makes the scan independent of training-row order
        order = np.lexsort((h[idx], g[idx], xj))
        xs = xj[order]
        distinct = xs[1:] > xs[:-1]
        if not distinct.any():
            continue
        GL = np.cumsum(g[idx][order])[:-1]
        HL = np.cumsum(h[idx][order])[:-1]
        GR, HR = G - GL, H - HL
        ok = distinct & (HL >= params.min_child_weight) & (HR >= params.min_child_weight)
        ok &= (HL + lam > 0) & (HR + lam > 0)
        if not ok.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = 0.5 * (GL ** 2 / (HL + lam) + GR ** 2 / (HR + lam) - parent) - params.min_split_gain
        gain = np.where(ok, gain, -np.inf)
        k = int(np.argmax(gain))
        if gain[k] > 0 and (best is None or gain[k] > best[0]):
            lo, hi = xs[k], xs[k + 1]
            thr = 0.5 * (lo + hi)
            if not lo < thr:
                thr = hi
            best = (float(gain[k]), j, float(thr))
    return best


def _grow(tree, X, g, h, idx, depth, params) -> int:
    lam = params.l2_reg
    G = math.fsum(g[idx])
    H = math.fsum(h[idx])
    split = _best_split(X, g, h, idx, params) if depth < params.max_depth else None
    if split is None:
        return tree._add(value=-G / (H + lam) if H + lam > 0 else 0.0)
    _, j, thr = split
    node = tree._add(feature=j, threshold=thr)
    go_left = X[idx, j] < thr
    tree.left[node] = _grow(tree, X, g, h, idx[go_left], depth + 1, params)
    tree.right[node] = _grow(tree, X, g, h, idx[~go_left], depth + 1, params)
    return node


def train_gbt(rows, targets_days, params: Optional[GBTParams] = None,
              feature_names: Optional[Sequence[str]] = None) -> GBTModel:
    params = params or GBTParams()
    X = _check_rows(rows)
    y = np.asarray(targets_days, dtype=np.float64)
    if len(X) < 2:
        raise InsufficientDataError("need at least two training rows")
    if y.shape != (len(X),):
        raise ShapeError(f"{len(X)} rows but targets of shape {y.shape}")
    if not np.isfinite(y).all() or (y < 0).any():
        raise InvalidDataError("targets must be finite and non-negative")

    base = math.fsum(y) / len(y)
    model = GBTModel(base, params.learning_rate, X.shape[1], [],
                     list(feature_names) if feature_names is not None else None, params)
    pred = np.full(len(y), base)
    h = np.ones(len(y))
    rng = np.random.default_rng(params.seed)
    for _ in range(params.n_trees):
        g = pred - y
        if params.subsample < 1.0:
            k = max(2, int(round(params.subsample * len(y))))
            idx = np.sort(rng.choice(len(y), size=k, replace=False))
        else:
            idx = np.arange(len(y))
        tree = Tree()
        _grow(tree, X, g, h, idx, 0, params)
        model.trees.append(tree)
        pred = pred + params.learning_rate * tree.predict(X)
    return model


def predict_gbt(model: GBTModel, rows) -> np.ndarray:
    """Predicted survival days; a single 1-D row gives a 0-D result."""
    X = np.asarray(rows, dtype=np.float64)
    single = X.ndim == 1
    X = _check_rows(X[None] if single else X)
    if X.shape[1] != model.n_features:
        raise ShapeError(f"model expects {model.n_features} features, got {X.shape[1]}")
    pred = np.full(len(X), model.base_score)
    for tree in model.trees:
        pred = pred + model.learning_rate * tree.predict(X)
    return pred[0] if single else pred


def save_model(model: GBTModel, path) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "base_score": model.base_score,
        "learning_rate": model.learning_rate,
        "n_features": model.n_features,
        "feature_names": model.feature_names,
        "params": asdict(model.params) if model.params else None,
        "trees": [asdict(t) for t in model.trees],
    }
    try:
        Path(path).write_text(json.dumps(doc, indent=1) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write model {path}: {exc}") from exc


def load_model(path) -> GBTModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise InvalidDataError(f"{path}: not a version-{MODEL_VERSION} survival model")
    return GBTModel(
        base_score=doc["base_score"],
        learning_rate=doc["learning_rate"],
        n_features=doc["n_features"],
        trees=[Tree(**t) for t in doc["trees"]],
        feature_names=doc["feature_names"],
        params=GBTParams(**doc["params"]) if doc["params"] else None,
    )


# --------------------------------------------------------------------------- buckets and metrics


class SurvivalBucket(enum.Enum):
    SHORT = "short"
    MID = "mid"
    LONG = "long"


def bucketize(days: float) -> SurvivalBucket:
    """Short below 10 months, Long above 15 months, Mid in between (boundaries inclusive)."""
    if not days >= 0:
        raise InvalidDataError(f"survival must be non-negative days, got {days}")
    if days < SHORT_LIMIT_DAYS:
        return SurvivalBucket.SHORT
    if days > LONG_LIMIT_DAYS:
        return SurvivalBucket.LONG
    return SurvivalBucket.MID


def spearman_r(a, b) -> float:
    """Pearson correlation of average ranks; NaN when either side is constant."""
    ra = rankdata(a, method="average")
    rb = rankdata(b, method="average")
    da, db = ra - ra.mean(), rb - rb.mean()
    denom = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
    if denom == 0:
        return math.nan
    return float(np.dot(da, db)) / denom


def evaluate_survival(pred_days, true_days) -> Dict[str, float]:
    pred = np.asarray(pred_days, dtype=np.float64)
    true = np.asarray(true_days, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ShapeError(f"prediction shape {pred.shape} and truth shape {true.shape} differ")
    if pred.size == 0:
        raise InsufficientDataError("no predictions to evaluate")
    # negative regressor outputs count as zero days when bucketing
    hits = [bucketize(max(p, 0.0)) == bucketize(t) for p, t in zip(pred, true)]
    se = (pred - true) ** 2
    return {
        "accuracy": float(np.mean(hits)),
        "mse": float(se.mean()),
        "median_se": float(np.median(se)),
        "std_se": float(se.std()),
        "spearman_r": spearman_r(pred, true),
    }
