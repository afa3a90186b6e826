"""Synthetic multi-modal studies with concentric geometric lesions.

Each study is a brain-shaped ellipsoid on a zero background holding one
ellipsoidal lesion: a necrotic core (label 1) inside an enhancing rim
(label 4) inside an edema shell (label 2). Every tissue class has its own
mean intensity per modality, each modality gets a random per-study gain, and
Gaussian noise is added. Survival depends on age and lesion volume.
"""
from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .volume_io import CHANNEL_ORDER, SegmentationVolume, Study, Volume, save_study

# rows: healthy tissue, necrosis, edema, enhancing; columns: FLAIR, T2, T1, T1c
_CLASS_MEANS = np.array([
    [300.0, 300.0, 500.0, 500.0],
    [400.0, 800.0, 250.0, 250.0],
    [650.0, 700.0, 400.0, 420.0],
    [550.0, 550.0, 420.0, 900.0],
])
_LABELS = (0, 1, 2, 4)

# normalized ellipsoidal radius boundaries: core < 0.4 <= rim < 0.7 <= edema < 1
CORE_RADIUS = 0.4
RIM_RADIUS = 0.7


def make_study(rng: np.random.Generator, patient_id: str, dims: Tuple[int, int, int] = (64, 64, 24),
               noise: float = 25.0, min_lesion_voxels: Optional[int] = None,
               radius_xy: Tuple[float, float] = (14.0, 17.0),
               radius_z: Tuple[float, float] = (9.0, 10.5)) -> Study:
    """One study on a ``dims`` grid; lesion semi-axes are drawn from the radius
    ranges (in voxels, quoted for a 64x64x24 grid and scaled with ``dims``).

    Lesions smaller than ``min_lesion_voxels`` are redrawn; the default is 2000
    on the reference grid, scaled by grid volume.
    """
    nx, ny, nz = dims
    gx, gy, gz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    c = np.array([(nx - 1) / 2, (ny - 1) / 2, (nz - 1) / 2])
    brain = ((gx - c[0]) / (0.45 * nx)) ** 2 + ((gy - c[1]) / (0.47 * ny)) ** 2 + ((gz - c[2]) / (0.5 * nz)) ** 2 <= 1

    if min_lesion_voxels is None:
        min_lesion_voxels = int(2000 * nx * ny * nz / (64 * 64 * 24))
    for _ in range(1000):
        a = rng.uniform(*radius_xy) * nx / 64
        cz = rng.uniform(*radius_z) * nz / 24
        centre = c + rng.uniform(-1, 1, 3) * np.array([0.1 * nx, 0.1 * ny, 0.05 * nz])
        r = np.sqrt(((gx - centre[0]) / a) ** 2 + ((gy - centre[1]) / a) ** 2 + ((gz - centre[2]) / cz) ** 2)
        lesion = (r < 1) & brain
        if lesion.sum() >= min_lesion_voxels:
            break
    else:
        raise ValueError(f"cannot place a lesion of {min_lesion_voxels} voxels on a {dims} grid")

    cls = np.zeros(dims, dtype=np.int64)
    cls[lesion] = 2
    cls[lesion & (r < RIM_RADIUS)] = 3
    cls[lesion & (r < CORE_RADIUS)] = 1

    gains = rng.uniform(0.8, 1.25, 4)
    volumes = {}
    for k, mod in enumerate(CHANNEL_ORDER):
        field = _CLASS_MEANS[cls, k] + rng.normal(0.0, noise, dims)
        field = np.where(brain, np.maximum(field, 1.0) * gains[k], 0.0)
        volumes[mod] = Volume(field, (1.0, 1.0, 1.0), mod)

    labels = np.asarray(_LABELS, dtype=np.uint8)[cls]
    age = float(np.round(rng.uniform(30, 80), 1))
    days = 1300.0 - 9.0 * age - 0.08 * lesion.sum() + rng.normal(0, 60)
    return Study(patient_id, volumes, SegmentationVolume(labels), age, float(np.round(max(days, 20.0), 1)))


def make_cohort(n: int, seed: int = 0, dims: Tuple[int, int, int] = (64, 64, 24), **kwargs) -> List[Study]:
    rng = np.random.default_rng(seed)
    return [make_study(rng, f"SYN{i:03d}", dims, **kwargs) for i in range(n)]


def write_cohort(studies, directory) -> List[Path]:
    """Save each study under ``directory/<patient_id>/`` and return the manifest paths."""
    directory = Path(directory)
    return [save_study(s, directory / s.patient_id) for s in studies]
