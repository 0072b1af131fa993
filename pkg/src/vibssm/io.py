"""Flat float32 arrays with JSON sidecars, shared by every persisted artifact."""

import json
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


def write_array(path, array, **meta):
    """Write ``array`` as little-endian float32 (C order) plus ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(array, dtype="<f4")
    path.write_bytes(arr.tobytes())
    sidecar = {"schema_version": SCHEMA_VERSION, "dtype": "float32-le", "shape": list(arr.shape)}
    sidecar.update(meta)
    write_json(path.with_name(path.name + ".json"), sidecar)
    return path


def read_array(path):
    path = Path(path)
    meta = read_json(path.with_name(path.name + ".json"))
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    return data.reshape(meta["shape"]).astype(np.float64), meta


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())
