"""DTEN tensor file format and manifest+DTEN checkpoint directories.

A DTEN file is: magic b"DTEN1", one u8 giving the number of dimensions,
the shape as little-endian u32 values, then the data as little-endian
float32, row-major. Checkpoints are directories holding one DTEN file per
named array plus a ``manifest.json`` describing them.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DTEN1"
MANIFEST_NAME = "manifest.json"


class DtenError(ValueError):
    """Raised on malformed DTEN files or inconsistent checkpoints."""


def write_dten(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f4").tobytes())


def read_dten(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise DtenError(f"{path}: bad magic {blob[:len(MAGIC)]!r}")
    ndim = blob[len(MAGIC)]
    header_end = len(MAGIC) + 1 + 4 * ndim
    if len(blob) < header_end:
        raise DtenError(f"{path}: truncated header")
    shape = struct.unpack(f"<{ndim}I", blob[len(MAGIC) + 1 : header_end])
    count = int(np.prod(shape)) if ndim else 1
    payload = blob[header_end:]
    if len(payload) != 4 * count:
        raise DtenError(f"{path}: expected {4 * count} data bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def write_json_atomic(path: str | Path, payload: dict) -> None:
    """Write JSON via a temp file + rename so readers never see partial data."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2) + "\n")
    os.replace(tmp, path)


def save_arrays(directory: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write one DTEN per named array plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in arrays.items():
        fname = name + ".dten"
        write_dten(directory / fname, arr)
        entries[name] = {"file": fname, "shape": list(np.shape(arr))}
    write_json_atomic(directory / MANIFEST_NAME, {"meta": meta, "arrays": entries})


def load_arrays(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise DtenError(f"{directory}: missing {MANIFEST_NAME}")
    manifest = json.loads(manifest_path.read_text())
    arrays = {}
    for name, entry in manifest["arrays"].items():
        arr = read_dten(directory / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise DtenError(f"{name}: shape {list(arr.shape)} != manifest {entry['shape']}")
        arrays[name] = arr
    return arrays, manifest["meta"]
