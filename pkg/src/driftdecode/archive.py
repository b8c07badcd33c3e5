"""Named-tensor archive: a small self-describing binary container.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"NTARCH01"
    8       8     u64    manifest length L in bytes
    16      L     UTF-8 JSON manifest
    16+L    ...   tensor payloads, concatenated in manifest order

The manifest is ``{"meta": {...}, "tensors": [entry, ...]}`` where each
entry is ``{"name", "dtype", "shape", "offset", "nbytes"}``; ``offset`` is
relative to the first payload byte. Supported dtypes are ``float32``,
``float64``, ``int64`` and ``uint8``, always stored little-endian and
C-contiguous.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"NTARCH01"
_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int64": np.dtype("<i8"),
    "uint8": np.dtype("u1"),
}


class ArchiveError(IOError):
    pass


def save_archive(path, tensors: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    entries = []
    payloads = []
    offset = 0
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPES:
            raise ArchiveError(f"tensor {name!r}: unsupported dtype {dtype_name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name]).tobytes()
        entries.append(
            {"name": name, "dtype": dtype_name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        payloads.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in payloads:
            fh.write(raw)
    tmp.replace(path)
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(16)
            if len(head) < 16 or head[:8] != MAGIC:
                head = None
            else:
                body = fh.read(struct.unpack("<Q", head[8:16])[0])
    except OSError as exc:
        raise ArchiveError(f"{path}: cannot read archive: {exc}") from exc
    if head is None:
        raise ArchiveError(f"{path}: not a named-tensor archive (bad magic)")
    try:
        manifest = json.loads(body.decode("utf-8"))
    except ValueError as exc:
        raise ArchiveError(f"{path}: corrupt manifest: {exc}") from exc
    manifest["_data_start"] = 16 + len(body)
    return manifest


def load_archive(path) -> tuple[OrderedDict, dict]:
    """Return ``(tensors, meta)``; tensors keep their on-disk order."""
    path = Path(path)
    manifest = read_manifest(path)
    start = manifest["_data_start"]
    blob = path.read_bytes()
    out = OrderedDict()
    for e in manifest["tensors"]:
        lo = start + e["offset"]
        chunk = blob[lo : lo + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ArchiveError(f"{path}: tensor {e['name']!r} truncated")
        arr = np.frombuffer(chunk, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return out, manifest["meta"]
