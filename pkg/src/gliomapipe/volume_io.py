"""Volume containers, the GPV1 file format, study manifests and slice extraction.

GPV1 layout (little-endian)::

    0-3    magic b"GPV1"
    4-15   dims (nx, ny, nz) as three u32
    16-27  spacing (sx, sy, sz) in mm as three f32
    28     modality code u8 (0 FLAIR, 1 T2, 2 T1, 3 T1c, 255 label map)
    29-63  reserved, zero
    64-    payload, f32, x-fastest

Arrays are held in memory with shape ``(nx, ny, nz)`` so that ``data[x, y, z]``
addresses voxel (x, y, z); the on-disk order is Fortran order of that array.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import yaml

from .errors import (
    CorruptFileError,
    FormatError,
    InvalidDataError,
    IoError,
    LabelError,
    MissingGroundTruthError,
    MissingModalityError,
    StudyInconsistentError,
)

PathLike = Union[str, Path]

MAGIC = b"GPV1"
HEADER_SIZE = 64
_HEADER = struct.Struct("<4s3I3fB35x")
LABEL_CODE = 255
VALID_LABELS = (0, 1, 2, 4)


class Modality(enum.IntEnum):
    FLAIR = 0
    T2 = 1
    T1 = 2
    T1C = 3

    @property
    def key(self) -> str:
        return self.name.lower()

    @classmethod
    def from_key(cls, key: str) -> "Modality":
        try:
            return cls[key.upper()]
        except KeyError:
            raise FormatError(f"unknown modality {key!r}") from None


# Network input channel order, shared by training and inference.
CHANNEL_ORDER: Tuple[Modality, ...] = (Modality.FLAIR, Modality.T2, Modality.T1, Modality.T1C)


def _check_spacing(spacing) -> Tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
        raise FormatError(f"spacing must be three positive numbers, got {spacing!r}")
    return sp


@dataclass(frozen=True, eq=False)
class Volume:
    """A single-modality 3-D scalar field.

    ``data`` is stored as a read-only float32 array of shape ``(nx, ny, nz)``.
    """

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: Optional[Modality] = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3:
            raise FormatError(f"volume data must be 3-D, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise InvalidDataError("volume contains NaN or Inf")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        if self.modality is not None:
            object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing, self.modality)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.modality == other.modality
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SegmentationVolume:
    """Per-voxel labels in {0, 1, 2, 4}: background, necrosis, edema, enhancing."""

    labels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        raw = np.asarray(self.labels)
        if raw.ndim != 3:
            raise FormatError(f"label data must be 3-D, got shape {raw.shape}")
        labels = raw.astype(np.uint8)
        if not np.array_equal(labels, raw):
            raise LabelError("labels must be small non-negative integers")
        bad = np.setdiff1d(np.unique(labels), VALID_LABELS)
        if bad.size:
            raise LabelError(f"labels outside {{0,1,2,4}}: {bad.tolist()}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)

    def __eq__(self, other):
        if not isinstance(other, SegmentationVolume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.labels, other.labels)

    __hash__ = None


@dataclass(frozen=True)
class Study:
    patient_id: str
    volumes: Dict[Modality, Volume] = field(default_factory=dict)
    ground_truth: Optional[SegmentationVolume] = None
    age: Optional[float] = None
    survival_days: Optional[float] = None

    def __post_init__(self):
        grids = {(v.dims, v.spacing) for v in self.volumes.values()}
        if self.ground_truth is not None:
            grids.add((self.ground_truth.dims, self.ground_truth.spacing))
        if len(grids) > 1:
            raise StudyInconsistentError(
                f"study {self.patient_id}: volumes disagree on dims/spacing: {sorted(grids)}"
            )
        if self.survival_days is not None and not self.survival_days >= 0:
            raise InvalidDataError(f"survival_days must be non-negative, got {self.survival_days}")

    @property
    def dims(self) -> Tuple[int, int, int]:
        if self.volumes:
            return next(iter(self.volumes.values())).dims
        if self.ground_truth is not None:
            return self.ground_truth.dims
        raise MissingModalityError(f"study {self.patient_id} has no volumes")

    @property
    def spacing(self) -> Tuple[float, float, float]:
        if self.volumes:
            return next(iter(self.volumes.values())).spacing
        if self.ground_truth is not None:
            return self.ground_truth.spacing
        raise MissingModalityError(f"study {self.patient_id} has no volumes")

    def require_modalities(self, modalities=CHANNEL_ORDER) -> None:
        missing = [m.key for m in modalities if m not in self.volumes]
        if missing:
            raise MissingModalityError(f"study {self.patient_id} lacks {', '.join(missing)}")

    def stacked(self) -> np.ndarray:
        """Return the four modalities as a float32 array of shape (4, nx, ny, nz)."""
        self.require_modalities()
        return np.stack([self.volumes[m].data for m in CHANNEL_ORDER])


# --------------------------------------------------------------------------- GPV1


def _encode(array: np.ndarray, spacing, code: int) -> bytes:
    if array.size == 0 or 0 in array.shape:
        raise FormatError("refusing to write an empty volume")
    header = _HEADER.pack(MAGIC, *[int(d) for d in array.shape], *[float(s) for s in spacing], code)
    payload = np.asarray(array, dtype="<f4").tobytes(order="F")
    return header + payload


def _write_bytes(blob: bytes, path: PathLike) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _decode(path: PathLike):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a GPV1 file")
    if len(blob) < HEADER_SIZE:
        raise CorruptFileError(f"{path}: truncated header")
    _, nx, ny, nz, sx, sy, sz, code = _HEADER.unpack_from(blob)
    if nx * ny * nz == 0:
        raise FormatError(f"{path}: zero-sized dims ({nx}, {ny}, {nz})")
    expected = HEADER_SIZE + 4 * nx * ny * nz
    if len(blob) != expected:
        raise CorruptFileError(f"{path}: payload is {len(blob) - HEADER_SIZE} bytes, header implies {expected - HEADER_SIZE}")
    data = np.frombuffer(blob, dtype="<f4", offset=HEADER_SIZE).reshape((nx, ny, nz), order="F")
    if not np.isfinite(data).all():
        raise InvalidDataError(f"{path}: payload contains NaN or Inf")
    return data.astype(np.float32), (sx, sy, sz), code


def write_volume(volume: Volume, path: PathLike) -> None:
    if not np.isfinite(volume.data).all():
        raise InvalidDataError("refusing to write a volume containing NaN or Inf")
    code = LABEL_CODE if volume.modality is None else int(volume.modality)
    _write_bytes(_encode(volume.data, volume.spacing, code), path)


def read_volume(path: PathLike) -> Volume:
    data, spacing, code = _decode(path)
    if code == LABEL_CODE:
        modality = None
    elif code in Modality._value2member_map_:
        modality = Modality(code)
    else:
        raise FormatError(f"{path}: unknown modality code {code}")
    return Volume(data, spacing, modality)


def write_segmentation(seg: SegmentationVolume, path: PathLike) -> None:
    _write_bytes(_encode(seg.labels.astype(np.float32), seg.spacing, LABEL_CODE), path)


def read_segmentation(path: PathLike) -> SegmentationVolume:
    data, spacing, _ = _decode(path)
    labels = data.astype(np.uint8)
    if not np.array_equal(labels, data):
        raise LabelError(f"{path}: label map holds non-integer values")
    return SegmentationVolume(labels, spacing)


# --------------------------------------------------------------------------- manifests

_MANIFEST_PATH_KEYS = ("flair", "t2", "t1", "t1c", "seg")


def read_manifest(path: PathLike) -> dict:
    """Parse a manifest into a dict with absolute paths."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise FormatError(f"{path}: malformed manifest: {exc}") from exc
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: manifest must be a key/value mapping")
    unknown = set(raw) - {"patient_id", "age", "survival_days", *_MANIFEST_PATH_KEYS}
    if unknown:
        raise FormatError(f"{path}: unknown manifest keys {sorted(unknown)}")
    out = {"patient_id": str(raw.get("patient_id", path.stem))}
    for key in ("age", "survival_days"):
        if raw.get(key) is not None:
            out[key] = float(raw[key])
    for key in _MANIFEST_PATH_KEYS:
        if raw.get(key):
            out[key] = (path.parent / str(raw[key])).resolve()
    return out


def write_manifest(path: PathLike, patient_id: str, files: Dict[str, PathLike],
                   age: Optional[float] = None, survival_days: Optional[float] = None) -> None:
    """Write a manifest; file paths are stored relative to the manifest when possible."""
    path = Path(path)
    doc = {"patient_id": patient_id}
    if age is not None:
        doc["age"] = float(age)
    if survival_days is not None:
        doc["survival_days"] = float(survival_days)
    for key in _MANIFEST_PATH_KEYS:
        if key in files:
            target = Path(files[key]).resolve()
            try:
                doc[key] = str(target.relative_to(path.parent.resolve()))
            except ValueError:
                doc[key] = str(target)
    _write_bytes(yaml.safe_dump(doc, sort_keys=False).encode(), path)


def read_study(manifest_path: PathLike, require_all: bool = False) -> Study:
    """Load every file a manifest lists and check that they share one grid.

    With ``require_all`` set, a manifest lacking any of the four modalities
    raises :class:`MissingModalityError`.
    """
    info = read_manifest(manifest_path)
    volumes = {}
    for mod in CHANNEL_ORDER:
        if mod.key in info:
            vol = read_volume(info[mod.key])
            volumes[mod] = Volume(vol.data, vol.spacing, mod)
    seg = read_segmentation(info["seg"]) if "seg" in info else None
    study = Study(info["patient_id"], volumes, seg, info.get("age"), info.get("survival_days"))
    if require_all:
        study.require_modalities()
    return study


def save_study(study: Study, directory: PathLike, suffix: str = "",
               manifest_name: str = "manifest.yaml") -> Path:
    """Write every volume of ``study`` plus a manifest into ``directory``.

    Volumes are named ``<modality><suffix>.gpv1``; the ground truth, if any,
    goes to ``seg.gpv1``. Returns the manifest path.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for mod, vol in study.volumes.items():
        files[mod.key] = directory / f"{mod.key}{suffix}.gpv1"
        write_volume(vol, files[mod.key])
    if study.ground_truth is not None:
        files["seg"] = directory / "seg.gpv1"
        write_segmentation(study.ground_truth, files["seg"])
    manifest = directory / manifest_name
    write_manifest(manifest, study.patient_id, files, study.age, study.survival_days)
    return manifest


# --------------------------------------------------------------------------- slices

Slice = Tuple[int, np.ndarray, Optional[np.ndarray]]


def extract_axial_slices(study: Study, lesion_only: bool = False) -> List[Slice]:
    """Cut a study into network inputs, one per axial plane.

    Each item is ``(z, x, labels)`` where ``x`` has shape ``(1, 4, nx, ny)`` so
    ``x[0, c, i, j] == volume_c.data[i, j, z]``, and ``labels`` is the matching
    uint8 label plane (or None without ground truth).
    """
    study.require_modalities()
    if lesion_only and study.ground_truth is None:
        raise MissingGroundTruthError(f"study {study.patient_id} has no ground truth")
    stack = study.stacked()
    gt = study.ground_truth.labels if study.ground_truth is not None else None
    out = []
    for z in range(stack.shape[-1]):
        plane = None if gt is None else np.ascontiguousarray(gt[:, :, z])
        if lesion_only and not plane.any():
            continue
        out.append((z, np.ascontiguousarray(stack[None, :, :, :, z]), plane))
    return out
