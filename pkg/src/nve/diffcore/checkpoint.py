"""Checkpoint file format.

A checkpoint is a single-line UTF-8 JSON header terminated by ``\\n``,
followed by raw little-endian parameter blobs:

    {"magic": "NVE1", "config": {...}, "params": [
        {"name": ..., "shape": [...], "dtype": "<f4"|"<f8",
         "trainable": true|false, "offset": N}, ...]}

Offsets are byte positions relative to the start of the blob section and
follow manifest order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import DiffArray, Parameter

MAGIC = "NVE1"

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def save_checkpoint(path, params, config: dict | None = None) -> None:
    """Write parameters (dict or iterable of Parameter) plus a config snapshot."""
    if isinstance(params, dict):
        params = list(params.values())
    manifest = []
    blobs = []
    offset = 0
    for p in params:
        arr = np.ascontiguousarray(p.values)
        dtype = "<f8" if arr.dtype == np.float64 else "<f4"
        blob = arr.astype(_DTYPES[dtype], copy=False).tobytes()
        manifest.append({
            "name": p.name,
            "shape": list(arr.shape),
            "dtype": dtype,
            "trainable": bool(p.trainable),
            "offset": offset,
        })
        blobs.append(blob)
        offset += len(blob)
    header = {"magic": MAGIC, "config": config or {}, "params": manifest}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, Parameter], dict]:
    """Read a checkpoint, returning ({name: Parameter}, config snapshot)."""
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("magic") != MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {header.get('magic')!r}")
    data = raw[nl + 1:]
    params: dict[str, Parameter] = {}
    for entry in header["params"]:
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=start).reshape(shape)
        params[entry["name"]] = Parameter(
            name=entry["name"],
            array=DiffArray(arr.copy()),
            trainable=entry.get("trainable", True),
        )
    return params, header["config"]
