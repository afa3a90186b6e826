"""Intensity standardization: histogram matching, then z-score normalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVolumeError, EmptyForegroundError
from .volume_io import Study, Volume

DEFAULT_LEVELS = 1024
ZSCORE_EPS = 1e-8


@dataclass(frozen=True, eq=False)
class ReferenceCdf:
    """Cumulative foreground histogram of a reference volume.

    ``levels`` are bin centres, ``cumulative[k]`` is the fraction of foreground
    voxels falling in bins ``0..k``.
    """

    levels: np.ndarray
    cumulative: np.ndarray
    foreground_threshold: float = 0.0

    @property
    def bin_width(self) -> float:
        return float(self.levels[1] - self.levels[0])


def _foreground(volume: Volume, threshold: float) -> np.ndarray:
    fg = volume.data[volume.data > threshold]
    if fg.size == 0:
        raise EmptyForegroundError("volume has no voxel above the foreground threshold")
    return fg.astype(np.float64)


def _cdf(values: np.ndarray, n_levels: int, threshold: float) -> ReferenceCdf:
    if n_levels < 2:
        raise ValueError("n_levels must be at least 2")
    # numpy widens a zero-width range to [v - 0.5, v + 0.5].
    counts, edges = np.histogram(values, bins=n_levels, range=(values.min(), values.max()))
    cumulative = np.cumsum(counts, dtype=np.float64) / values.size
    cumulative[-1] = 1.0
    levels = 0.5 * (edges[:-1] + edges[1:])
    return ReferenceCdf(levels, cumulative, threshold)


def compute_reference_cdf(volume: Volume, n_levels: int = DEFAULT_LEVELS,
                          foreground_threshold: float = 0.0) -> ReferenceCdf:
    return _cdf(_foreground(volume, foreground_threshold), n_levels, foreground_threshold)


def inverse_cdf(probs: np.ndarray, cdf: ReferenceCdf) -> np.ndarray:
    """Smallest intensity whose piecewise-linear cumulative reaches each probability.

    Between knots ``k-1`` and ``k`` with ``cumulative[k-1] < p < cumulative[k]``
    the level is interpolated linearly; an exact hit on a flat run returns the
    first level of that run.
    """
    cum, levels = cdf.cumulative, cdf.levels
    k = np.searchsorted(cum, probs, side="left")
    k = np.clip(k, 0, len(cum) - 1)
    prev = np.maximum(k - 1, 0)
    lo, hi = cum[prev], cum[k]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(hi > lo, (probs - lo) / (hi - lo), 1.0)
    frac = np.clip(frac, 0.0, 1.0)
    out = levels[prev] + frac * (levels[k] - levels[prev])
    return np.where(k == 0, levels[0], out)


def histogram_match(volume: Volume, reference: ReferenceCdf, n_levels: int = DEFAULT_LEVELS) -> Volume:
    """Map foreground intensities through the source CDF, then the inverse reference CDF.

    The source CDF is piecewise linear between its bin centres. Background
    voxels are written as 0.
    """
    threshold = reference.foreground_threshold
    source = _cdf(_foreground(volume, threshold), n_levels, threshold)

    data = volume.data.astype(np.float64)
    mask = data > threshold
    probs = np.interp(data[mask], source.levels, source.cumulative)

    out = np.zeros_like(data)
    out[mask] = inverse_cdf(probs, reference)
    return volume.with_data(out)


def zscore_normalize(volume: Volume, foreground_only: bool = False,
                     foreground_threshold: float = 0.0) -> Volume:
    """Return ``(X - mean) / std`` using population statistics of the volume.

    With ``foreground_only`` the statistics come from voxels above the
    threshold and only those voxels are transformed; background stays 0.
    """
    data = volume.data.astype(np.float64)
    if foreground_only:
        mask = data > foreground_threshold
        if not mask.any():
            raise EmptyForegroundError("volume has no foreground voxels")
        sample = data[mask]
    else:
        mask = None
        sample = data
    mu = sample.mean()
    sigma = sample.std()
    if sigma <= ZSCORE_EPS:
        raise DegenerateVolumeError(f"standard deviation {sigma:g} is too small to normalize")
    if mask is None:
        out = (data - mu) / sigma
    else:
        out = np.zeros_like(data)
        out[mask] = (sample - mu) / sigma
    return volume.with_data(out)


def preprocess_study(study: Study, references: dict, n_levels: int = DEFAULT_LEVELS,
                     foreground_only: bool = False):
    """Match every modality to its same-modality reference CDF, then z-score.

    Returns ``(matched, normalized)`` studies; the matched one feeds radiomics.
    """
    matched, normalized = {}, {}
    for mod, vol in study.volumes.items():
        matched[mod] = histogram_match(vol, references[mod], n_levels)
        normalized[mod] = zscore_normalize(matched[mod], foreground_only=foreground_only)
    fields = dict(patient_id=study.patient_id, ground_truth=study.ground_truth,
                  age=study.age, survival_days=study.survival_days)
    return Study(volumes=matched, **fields), Study(volumes=normalized, **fields)
