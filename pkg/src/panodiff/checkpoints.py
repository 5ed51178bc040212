"""Checkpoint directories: named raw tensor files plus a JSON manifest.

Each tensor is written as little-endian C-order bytes under `<name>.bin`;
manifest.json records shapes, dtypes, the creating seed, the config used,
and a hash of that config, so loads are exact and self-describing.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64}


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, tensors: dict, config: dict, seed: int, extra: dict | None = None) -> None:
    path = os.fspath(path)
    os.makedirs(path, exist_ok=True)
    entries = {}
    for name, tensor in tensors.items():
        arr = np.ascontiguousarray(np.asarray(tensor))
        if arr.dtype.name not in _DTYPES:
            arr = arr.astype(np.float32)
        fname = f"{name}.bin"
        arr.astype(arr.dtype.newbyteorder("<")).tofile(os.path.join(path, fname))
        entries[name] = {"file": fname, "shape": list(arr.shape), "dtype": arr.dtype.name}
    manifest = {
        "version": 1,
        "seed": seed,
        "config": config,
        "config_hash": config_hash(config),
        "tensors": entries,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (tensors, manifest); raises FileNotFoundError when absent."""
    path = os.fspath(path)
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"no checkpoint manifest under {path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    tensors = {}
    for name, entry in manifest["tensors"].items():
        dtype = np.dtype(_DTYPES[entry["dtype"]]).newbyteorder("<")
        raw = np.fromfile(os.path.join(path, entry["file"]), dtype=dtype)
        tensors[name] = raw.astype(_DTYPES[entry["dtype"]]).reshape(entry["shape"])
    return tensors, manifest
