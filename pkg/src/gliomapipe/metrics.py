"""Dice overlap over the whole-tumor, tumor-core and active-tumor regions."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np

from .errors import InsufficientDataError, ShapeError
from .volume_io import SegmentationVolume

REGIONS: Dict[str, tuple] = {
    "whole": (1, 2, 4),
    "core": (1, 4),
    "active": (4,),
}


def _labels(x):
    return x.labels if isinstance(x, SegmentationVolume) else np.asarray(x)


def dice(pred, truth, region: str = "whole", empty_policy: str = "one") -> float:
    """``2|P & T| / (|P| + |T|)`` on the region's binarized label sets.

    When both sets are empty the score is 1.0, or NaN with ``empty_policy="nan"``.
    """
    p, t = _labels(pred), _labels(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    labels = REGIONS[region]
    pm, tm = np.isin(p, labels), np.isin(t, labels)
    denom = int(pm.sum()) + int(tm.sum())
    if denom == 0:
        if empty_policy == "nan":
            return math.nan
        return 1.0
    return 2.0 * int((pm & tm).sum()) / denom


@dataclass(frozen=True)
class DiceReport:
    whole: float
    core: float
    active: float


def dice_report(pred, truth, empty_policy: str = "one") -> DiceReport:
    return DiceReport(*(dice(pred, truth, r, empty_policy) for r in REGIONS))


def cohort_summary(reports: Sequence[DiceReport]) -> Dict[str, Dict[str, float]]:
    """Mean, population std and median per region; NaN scores are left out."""
    if not reports:
        raise InsufficientDataError("cohort is empty")
    out = {}
    for region in REGIONS:
        values = np.array([getattr(r, region) for r in reports], dtype=np.float64)
        # sorted so the float sums do not depend on cohort order
        values = np.sort(values[~np.isnan(values)])
        if values.size == 0:
            out[region] = {"mean": math.nan, "std": math.nan, "median": math.nan, "n": 0}
            continue
        out[region] = {
            "mean": float(values.mean()),
            "std": float(values.std()),
            "median": float(np.median(values)),
            "n": int(values.size),
        }
    return out
