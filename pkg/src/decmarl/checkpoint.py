"""JSON + flat little-endian binary checkpoints.

``<stem>.json`` holds user metadata plus an ``arrays`` table of
``{name, dtype, shape, offset}`` (offset in bytes into ``<stem>.bin``).
Arrays are stored C-ordered as ``<f8``, ``<i8`` or ``|b1``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_DTYPES = {"f8": "<f8", "i8": "<i8", "b1": "|b1"}


def _kind(a: np.ndarray) -> str:
    if a.dtype == np.bool_:
        return "b1"
    if np.issubdtype(a.dtype, np.integer):
        return "i8"
    return "f8"


def save(stem, meta: dict, arrays: dict) -> tuple[Path, Path]:
    stem = Path(stem)
    table, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        kind = _kind(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        table.append({"name": name, "dtype": kind, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    meta_path, bin_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    meta_path.write_text(json.dumps({"meta": meta, "arrays": table}, indent=1))
    bin_path.write_bytes(b"".join(chunks))
    return meta_path, bin_path


def load(stem) -> tuple[dict, dict]:
    stem = Path(stem)
    doc = json.loads(stem.with_suffix(".json").read_text())
    blob = stem.with_suffix(".bin").read_bytes()
    arrays = {}
    for entry in doc["arrays"]:
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        a = np.frombuffer(blob, dtype=dt, count=count, offset=entry["offset"])
        arrays[entry["name"]] = a.reshape(entry["shape"]).copy()
    return doc["meta"], arrays
