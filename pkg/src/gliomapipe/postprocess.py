"""False-positive removal with 3-D connected components, and lesion sub-masks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np
from scipy import ndimage

from .errors import LabelError
from .volume_io import VALID_LABELS, SegmentationVolume

DEFAULT_MIN_SIZE = 2000
DEFAULT_CONNECTIVITY = 26

_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


@dataclass(frozen=True, eq=False)
class ComponentLabeling:
    """``labels`` holds component ids 1..K (0 = background); ``sizes[k - 1]`` is the voxel count of id k."""

    labels: np.ndarray
    sizes: np.ndarray

    @property
    def count(self) -> int:
        return int(self.sizes.size)


def connected_components_3d(binary, connectivity: int = DEFAULT_CONNECTIVITY) -> ComponentLabeling:
    """Label the foreground of a 3-D array.

    Ids are canonical: components are numbered in the order their first voxel
    appears in an x-fastest scan (Fortran order of the ``(nx, ny, nz)`` array).
    """
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    binary = np.asarray(binary).astype(bool)
    if binary.ndim != 3:
        raise ValueError(f"expected a 3-D array, got shape {binary.shape}")
    raw, k = ndimage.label(binary, structure=_STRUCTURES[connectivity])
    if k == 0:
        return ComponentLabeling(np.zeros(binary.shape, dtype=np.int32), np.zeros(0, dtype=np.int64))
    flat = raw.ravel(order="F")
    nz = np.flatnonzero(flat)
    ids, first = np.unique(flat[nz], return_index=True)
    order = ids[np.argsort(nz[first])]
    remap = np.zeros(k + 1, dtype=np.int32)
    remap[order] = np.arange(1, k + 1, dtype=np.int32)
    labels = remap[raw]
    sizes = np.bincount(labels.ravel(), minlength=k + 1)[1:].astype(np.int64)
    return ComponentLabeling(labels, sizes)


def remove_small_components(seg: SegmentationVolume, threshold_voxels: int = DEFAULT_MIN_SIZE,
                            connectivity: int = DEFAULT_CONNECTIVITY) -> SegmentationVolume:
    """Zero every lesion component with fewer than ``threshold_voxels`` voxels.

    Components are found on the whole-lesion mask (any nonzero label); kept
    components retain their original class labels.
    """
    if threshold_voxels < 0:
        raise ValueError("threshold_voxels must be non-negative")
    comps = connected_components_3d(seg.labels != 0, connectivity)
    keep = np.concatenate(([False], comps.sizes >= threshold_voxels))
    labels = np.where(keep[comps.labels], seg.labels, 0).astype(np.uint8)
    return SegmentationVolume(labels, seg.spacing)


@dataclass(frozen=True, eq=False)
class MaskSet:
    whole: np.ndarray
    edema: np.ndarray
    necrosis: np.ndarray
    enhancing: np.ndarray

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {"whole": self.whole, "edema": self.edema, "necrosis": self.necrosis, "enhancing": self.enhancing}


MASK_ORDER = ("whole", "edema", "necrosis", "enhancing")


def binarize_masks(seg) -> MaskSet:
    labels = seg.labels if isinstance(seg, SegmentationVolume) else np.asarray(seg)
    bad = np.setdiff1d(np.unique(labels), VALID_LABELS)
    if bad.size:
        raise LabelError(f"unexpected labels {bad.tolist()}")
    return MaskSet(
        whole=labels != 0,
        edema=labels == 2,
        necrosis=labels == 1,
        enhancing=labels == 4,
    )
