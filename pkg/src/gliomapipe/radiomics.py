"""First-order intensity and voxel-shape features of lesion masks.

Surface area is the area of exposed voxel faces rather than a marching-cubes
mesh, so every shape feature has an exact closed form on voxelized objects.
"""
from __future__ import annotations

import math
from dataclasses import astuple, dataclass, field, fields
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import EmptyLesionError, EmptyMaskError, InvalidDataError, MissingModalityError, ShapeError
from .postprocess import MASK_ORDER, MaskSet
from .volume_io import Modality, Study, Volume

DEFAULT_BIN_WIDTH = 25.0


@dataclass(frozen=True)
class FirstOrderFeatures:
    volume_mm3: float
    total_energy: float
    entropy: float
    minimum: float
    p10: float
    p90: float
    maximum: float
    mean: float
    median: float
    iqr: float
    range: float
    mad: float
    robust_mad: float
    rms: float
    std: float
    skewness: float
    kurtosis: float
    variance: float
    uniformity: float
    degenerate: bool = field(default=False, compare=False)


@dataclass(frozen=True)
class ShapeFeatures:
    volume_mm3: float
    surface_area_mm2: float
    surface_to_volume: float
    sphericity: float
    spherical_disproportion: float
    compactness1: float
    max_3d_diameter: float
    max_2d_axial: float
    max_2d_coronal: float
    max_2d_sagittal: float
    major_axis: float
    minor_axis: float
    least_axis: float
    elongation: float
    flatness: float
    compactness2: float
    degenerate: bool = field(default=False, compare=False)


FIRST_ORDER_NAMES: Tuple[str, ...] = tuple(f.name for f in fields(FirstOrderFeatures) if f.name != "degenerate")
SHAPE_NAMES: Tuple[str, ...] = tuple(f.name for f in fields(ShapeFeatures) if f.name != "degenerate")


def _values(features) -> List[float]:
    return [float(v) for v in astuple(features)[:-1]]


def _as_mask(mask, shape) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    if mask.shape != tuple(shape):
        raise ShapeError(f"mask shape {mask.shape} does not match image shape {tuple(shape)}")
    if not mask.any():
        raise EmptyMaskError("mask is empty")
    return mask


# --------------------------------------------------------------------------- first order


def first_order_features(image: Volume, mask, bin_width: float = DEFAULT_BIN_WIDTH) -> FirstOrderFeatures:
    """Intensity statistics of ``image`` inside ``mask``.

    Histogram features (entropy, uniformity) use bins of ``bin_width``
    starting at the masked minimum. Percentiles interpolate linearly,
    kurtosis is not excess-corrected, and variance is the population one.
    """
    mask = _as_mask(mask, image.dims)
    x = image.data[mask].astype(np.float64)
    n = x.size
    vv = image.voxel_volume

    lo, hi = x.min(), x.max()
    p10, p25, p50, p75, p90 = np.percentile(x, [10, 25, 50, 75, 90])
    mean = x.mean()
    dev = x - mean
    m2 = np.mean(dev ** 2)
    m3 = np.mean(dev ** 3)
    m4 = np.mean(dev ** 4)
    degenerate = n < 2 or m2 == 0
    skew = 0.0 if degenerate else m3 / m2 ** 1.5
    kurt = 0.0 if degenerate else m4 / m2 ** 2

    bins = np.floor((x - lo) / bin_width).astype(np.int64)
    p = np.bincount(bins) / n
    p = p[p > 0]

    # with very few voxels no value may fall inside [p10, p90]
    robust = x[(x >= p10) & (x <= p90)]
    robust_mad = float(np.mean(np.abs(robust - robust.mean()))) if robust.size else 0.0
    degenerate = degenerate or robust.size == 0
    sum_sq = np.sum(x * x)
    return FirstOrderFeatures(
        volume_mm3=n * vv,
        total_energy=vv * sum_sq,
        entropy=float(-np.sum(p * np.log2(p))) + 0.0,
        minimum=lo,
        p10=p10,
        p90=p90,
        maximum=hi,
        mean=mean,
        median=p50,
        iqr=p75 - p25,
        range=hi - lo,
        mad=np.mean(np.abs(dev)),
        robust_mad=robust_mad,
        rms=math.sqrt(sum_sq / n),
        std=math.sqrt(m2),
        skewness=skew,
        kurtosis=kurt,
        variance=m2,
        uniformity=float(np.sum(p * p)),
        degenerate=bool(degenerate),
    )


# --------------------------------------------------------------------------- shape


def _exposed_faces(mask: np.ndarray) -> Tuple[int, int, int]:
    padded = np.pad(mask, 1)
    return tuple(int(np.count_nonzero(np.diff(padded, axis=a))) for a in range(3))


def _boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbour (or on the array edge)."""
    p = np.pad(mask, 1)
    interior = (
        p[:-2, 1:-1, 1:-1] & p[2:, 1:-1, 1:-1]
        & p[1:-1, :-2, 1:-1] & p[1:-1, 2:, 1:-1]
        & p[1:-1, 1:-1, :-2] & p[1:-1, 1:-1, 2:]
    )
    return mask & ~interior


def _brute_max_distance(points: np.ndarray, chunk: int = 2048) -> float:
    best = 0.0
    for start in range(0, len(points), chunk):
        block = points[start:start + chunk]
        d2 = ((block[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1)
        best = max(best, float(d2.max()))
    return math.sqrt(best)


def max_pairwise_distance(points: np.ndarray) -> float:
    """Largest Euclidean distance between any two rows of ``points``.

    Large sets are first reduced to their convex-hull vertices, which always
    contain the farthest pair.
    """
    if len(points) < 2:
        return 0.0
    if len(points) > 256:
        try:
            points = points[ConvexHull(points).vertices]
        except (QhullError, ValueError):
            pass
    return _brute_max_distance(points)


def _max_planar_diameter(coords: np.ndarray, axis: int) -> float:
    """Max in-slice diameter over all slices orthogonal to ``axis``; coords are (index, physical)."""
    idx, phys = coords
    order = np.argsort(idx[:, axis], kind="stable")
    keys = idx[order, axis]
    pts = np.delete(phys[order], axis, axis=1)
    cuts = np.flatnonzero(np.diff(keys)) + 1
    return max(max_pairwise_distance(group) for group in np.split(pts, cuts))


def shape_features(mask, spacing=(1.0, 1.0, 1.0)) -> ShapeFeatures:
    """Voxel-based shape descriptors of a binary ``(nx, ny, nz)`` mask."""
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 3:
        raise ShapeError(f"mask must be 3-D, got shape {mask.shape}")
    if not mask.any():
        raise EmptyMaskError("mask is empty")
    sx, sy, sz = (float(s) for s in spacing)
    spacing_arr = np.array([sx, sy, sz])

    n = int(mask.sum())
    volume = n * sx * sy * sz
    fx, fy, fz = _exposed_faces(mask)
    area = fx * sy * sz + fy * sx * sz + fz * sx * sy

    sphericity = math.pi ** (1 / 3) * (6 * volume) ** (2 / 3) / area
    compactness1 = volume / (math.sqrt(math.pi) * area ** 1.5)
    compactness2 = 36 * math.pi * volume ** 2 / area ** 3

    b_idx = np.argwhere(_boundary(mask))
    b_phys = b_idx * spacing_arr
    max3d = max_pairwise_distance(b_phys)
    # axial planes have fixed z, coronal fixed y, sagittal fixed x
    axial = _max_planar_diameter((b_idx, b_phys), 2)
    coronal = _max_planar_diameter((b_idx, b_phys), 1)
    sagittal = _max_planar_diameter((b_idx, b_phys), 0)

    coords = np.argwhere(mask) * spacing_arr
    coords = coords - coords.mean(axis=0)
    cov = coords.T @ coords / n
    lam = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)
    l1, l2, l3 = (float(v) for v in lam)
    degenerate = l1 <= 0 or l3 <= 1e-12 * l1
    elongation = math.sqrt(l2 / l1) if l1 > 0 else 0.0
    flatness = math.sqrt(l3 / l1) if l1 > 0 else 0.0

    return ShapeFeatures(
        volume_mm3=volume,
        surface_area_mm2=area,
        surface_to_volume=area / volume,
        sphericity=sphericity,
        spherical_disproportion=1.0 / sphericity,
        compactness1=compactness1,
        max_3d_diameter=max3d,
        max_2d_axial=axial,
        max_2d_coronal=coronal,
        max_2d_sagittal=sagittal,
        major_axis=4 * math.sqrt(l1),
        minor_axis=4 * math.sqrt(l2),
        least_axis=4 * math.sqrt(l3),
        elongation=elongation,
        flatness=flatness,
        compactness2=compactness2,
        degenerate=bool(degenerate),
    )


# --------------------------------------------------------------------------- feature rows

# both blocks carry a volume; the shape one is renamed so CSV headers stay unique
_SHAPE_COLUMNS = tuple("shape_volume_mm3" if n == "volume_mm3" else n for n in SHAPE_NAMES)
FEATURE_NAMES: Tuple[str, ...] = tuple(
    f"{m}.{name}" for m in MASK_ORDER for name in FIRST_ORDER_NAMES + _SHAPE_COLUMNS
) + ("age",)


@dataclass(frozen=True, eq=False)
class FeatureRow:
    patient_id: str
    values: np.ndarray
    missing_masks: Tuple[str, ...] = ()
    degenerate: Tuple[str, ...] = ()

    names = FEATURE_NAMES


def extract_feature_row(study: Study, mask_set: MaskSet, age: Optional[float] = None,
                        bin_width: float = DEFAULT_BIN_WIDTH) -> FeatureRow:
    """Concatenate, per mask in (whole, edema, necrosis, enhancing), the 19
    first-order features of T1c and the 16 shape features, followed by age.

    Empty sub-masks contribute zeros and are listed in ``missing_masks``.
    """
    if Modality.T1C not in study.volumes:
        raise MissingModalityError(f"study {study.patient_id} has no T1c volume")
    t1c = study.volumes[Modality.T1C]
    age = study.age if age is None else age
    if age is None or not math.isfinite(age):
        raise InvalidDataError(f"study {study.patient_id} has no usable age")
    masks = mask_set.as_dict()
    if not masks["whole"].any():
        raise EmptyLesionError(f"study {study.patient_id}: whole-lesion mask is empty")

    values, missing, degenerate = [], [], []
    for name in MASK_ORDER:
        mask = masks[name]
        if not mask.any():
            values.extend([0.0] * (len(FIRST_ORDER_NAMES) + len(SHAPE_NAMES)))
            missing.append(name)
            continue
        fo = first_order_features(t1c, mask, bin_width)
        sh = shape_features(mask, t1c.spacing)
        if fo.degenerate:
            degenerate.append(f"{name}.first_order")
        if sh.degenerate:
            degenerate.append(f"{name}.shape")
        values.extend(_values(fo))
        values.extend(_values(sh))
    values.append(float(age))
    return FeatureRow(study.patient_id, np.array(values, dtype=np.float64), tuple(missing), tuple(degenerate))
