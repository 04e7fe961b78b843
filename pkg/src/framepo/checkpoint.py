"""Checkpoints: a JSON manifest plus one little-endian raw tensor blob.

``<stem>.json`` lists ``{name, shape, dtype, byte_offset}`` per tensor and
``<stem>.bin`` holds the tensors back to back.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .policy import PolicyParams

__all__ = ["save_checkpoint", "load_checkpoint", "save_tensors", "load_tensors"]

_DTYPES = {"f64": "<f8", "f32": "<f4"}


def save_tensors(tensors: dict, stem, dtype: str = "f64", meta: dict | None = None) -> tuple:
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": dtype, "byte_offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": "framepo-ckpt-1", "blob": stem.name + ".bin", "tensors": entries}
    if meta:
        manifest["meta"] = meta
    json_path = stem.with_suffix(".json")
    bin_path = stem.with_suffix(".bin")
    bin_path.write_bytes(b"".join(chunks))
    json_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return json_path, bin_path


def load_tensors(stem) -> tuple:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    manifest = json.loads(stem.with_suffix(".json").read_text())
    blob = (stem.parent / manifest["blob"]).read_bytes()
    out = {}
    for e in manifest["tensors"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=e["byte_offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return out, manifest.get("meta", {})


def save_checkpoint(params: PolicyParams, stem, dtype: str = "f64", meta: dict | None = None) -> tuple:
    return save_tensors(dict(params.items()), stem, dtype=dtype, meta=meta)


def load_checkpoint(stem) -> PolicyParams:
    tensors, _ = load_tensors(stem)
    missing = set(PolicyParams.names()) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint missing tensors: {sorted(missing)}")
    return PolicyParams(**{k: tensors[k] for k in PolicyParams.names()})
