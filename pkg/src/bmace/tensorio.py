"""Manifest-plus-blob container for named float32 tensors.

Two files: ``<base>.json`` holds a UTF-8 JSON manifest (format tag, free-form
metadata, and per-tensor name/shape/dtype/byte-offset records) and
``<base>.bin`` holds the raw little-endian float32 values back to back in
manifest order. Loading validates the blob length against the manifest.
Model checkpoints use the tag "bmace-ckpt-1"; feature caches reuse the same
container with tag "bmace-feat-1".
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "bmace-ckpt-1"
FEATURES_FORMAT = "bmace-feat-1"

_DTYPE_TAG = "f32le"
_F32 = np.dtype("<f4")


class BlobFormatError(ValueError):
    """Raised when a manifest or blob does not match the container contract."""


def _base(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".bin") else p


def manifest_path(path) -> Path:
    return _base(path).with_suffix(".json")


def blob_path(path) -> Path:
    return _base(path).with_suffix(".bin")


def write_tensors(path, fmt: str, meta: dict, named_arrays) -> tuple[Path, Path]:
    """Write (name, array) pairs; arrays are stored as little-endian float32."""
    records = []
    chunks = []
    offset = 0
    seen = set()
    for name, arr in named_arrays:
        if name in seen:
            raise BlobFormatError(f"duplicate tensor name {name!r}")
        seen.add(name)
        data = np.ascontiguousarray(np.asarray(arr), dtype=_F32)
        raw = data.tobytes()
        records.append({
            "name": name,
            "shape": list(data.shape),
            "dtype": _DTYPE_TAG,
            "offset": offset,
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": fmt,
        "meta": meta,
        "tensors": records,
        "blob_bytes": offset,
    }
    mpath, bpath = manifest_path(path), blob_path(path)
    mpath.write_text(json.dumps(manifest, indent=1, sort_keys=False) + "\n", encoding="utf-8")
    bpath.write_bytes(b"".join(chunks))
    return mpath, bpath


def read_tensors(path, expect_format: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Read a container back; returns (format tag, meta, name -> float32 array)."""
    mpath, bpath = manifest_path(path), blob_path(path)
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BlobFormatError(f"{mpath}: manifest is not valid JSON: {exc}") from exc
    fmt = manifest.get("format")
    if expect_format is not None and fmt != expect_format:
        raise BlobFormatError(f"{mpath}: format {fmt!r}, expected {expect_format!r}")
    blob = bpath.read_bytes()
    declared = manifest.get("blob_bytes")
    if declared != len(blob):
        raise BlobFormatError(
            f"{bpath}: blob holds {len(blob)} bytes but manifest declares {declared}")
    tensors: dict[str, np.ndarray] = {}
    for rec in manifest["tensors"]:
        if rec["dtype"] != _DTYPE_TAG:
            raise BlobFormatError(f"{mpath}: unsupported tensor dtype {rec['dtype']!r}")
        shape = tuple(int(s) for s in rec["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = int(rec["offset"])
        end = start + count * 4
        if end > len(blob):
            raise BlobFormatError(f"{bpath}: tensor {rec['name']!r} overruns the blob")
        tensors[rec["name"]] = np.frombuffer(blob, dtype=_F32, count=count,
                                             offset=start).reshape(shape).copy()
    return fmt, manifest.get("meta", {}), tensors
