"""Static PPM rendering of a FLAIR slice with the lesion labels blended on top."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import MissingModalityError, ShapeError
from .volume_io import Modality, SegmentationVolume, Study

LABEL_COLORS = {
    1: (255, 0, 0),    # necrotic core
    2: (0, 255, 0),    # edema
    4: (255, 255, 0),  # enhancing
}
ALPHA = 0.5


def overlay_rgb(study: Study, seg: SegmentationVolume, slice_index: int, alpha: float = ALPHA) -> np.ndarray:
    """RGB uint8 image of axial slice ``slice_index``; rows follow x, columns y."""
    if Modality.FLAIR not in study.volumes:
        raise MissingModalityError("overlay needs the FLAIR volume")
    flair = study.volumes[Modality.FLAIR].data
    if seg.labels.shape != flair.shape:
        raise ShapeError(f"segmentation {seg.labels.shape} does not match study {flair.shape}")
    nz = flair.shape[2]
    if not 0 <= slice_index < nz:
        raise ShapeError(f"slice index {slice_index} outside 0..{nz - 1}")

    plane = flair[:, :, slice_index].astype(np.float64)
    lo, hi = plane.min(), plane.max()
    gray = (plane - lo) / (hi - lo) * 255.0 if hi > lo else np.zeros_like(plane)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    labels = seg.labels[:, :, slice_index]
    for label, color in LABEL_COLORS.items():
        sel = labels == label
        rgb[sel] = (1 - alpha) * rgb[sel] + alpha * np.asarray(color, dtype=np.float64)
    return np.rint(rgb).astype(np.uint8)


def render_overlay(study: Study, seg: SegmentationVolume, slice_index: int, out_image) -> None:
    """Write the blended slice as a binary (P6) portable pixmap."""
    rgb = overlay_rgb(study, seg, slice_index)
    h, w = rgb.shape[:2]
    Path(out_image).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())
