"""Versioned binary checkpoint container.

Layout: ``b"GPCK"``, u32 format version, u32 header length, a UTF-8 JSON
header (sorted keys) and then the raw little-endian float32 payload of every
tensor listed in ``header["tensors"]``, in that order. The writer is fully
deterministic, so identical state gives identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from ..errors import CorruptFileError, FormatError, IoError

MAGIC = b"GPCK"
VERSION = 1


def save_checkpoint(path, tensors: Dict[str, np.ndarray], meta: dict) -> None:
    entries = [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    chunks += [np.ascontiguousarray(v, dtype="<f4").tobytes() for v in tensors.values()]
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + hlen].decode())
    offset = 12 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 4 * count > len(blob):
            raise CorruptFileError(f"{path}: truncated payload for {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(blob, "<f4", count, offset).reshape(shape).astype(np.float32)
        offset += 4 * count
    if offset != len(blob):
        raise CorruptFileError(f"{path}: {len(blob) - offset} trailing bytes")
    return tensors, header["meta"]
