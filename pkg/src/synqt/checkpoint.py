"""Checkpoint format: one little-endian float64 blob plus a JSON manifest.

Each named parameter occupies a flat segment of ``<path>.bin``; the manifest
``<path>.json`` lists ``{name, shape, offset}`` with byte offsets.  Round
trips are bit-exact.
"""

import json
from pathlib import Path

import numpy as np


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(named_tensors, path):
    """Write ``{name: Tensor|ndarray}`` to ``path.bin`` / ``path.json``."""
    blob, manifest = serialize(named_tensors)
    path = Path(path)
    path.with_suffix(".bin").write_bytes(blob)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def serialize(named_tensors):
    parts = []
    entries = []
    offset = 0
    for name, t in named_tensors.items():
        arr = np.ascontiguousarray(getattr(t, "data", t), dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        parts.append(raw)
        offset += len(raw)
    manifest = {"dtype": "<f8", "params": entries}
    return b"".join(parts), manifest


def load_checkpoint(path):
    """Read back ``{name: ndarray}``; raises CheckpointError on a bad manifest."""
    path = Path(path)
    try:
        manifest = json.loads(path.with_suffix(".json").read_text())
        blob = path.with_suffix(".bin").read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return deserialize(blob, manifest)


def deserialize(blob, manifest):
    if manifest.get("dtype") != "<f8":
        raise CheckpointError(f"unsupported dtype {manifest.get('dtype')!r}")
    out = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        stop = start + count * 8
        if stop > len(blob):
            raise CheckpointError(f"segment for {entry['name']!r} exceeds blob size")
        out[entry["name"]] = np.frombuffer(blob[start:stop], dtype="<f8").reshape(shape).copy()
    return out


def restore_into(named_tensors, loaded):
    """Copy loaded arrays into existing tensors, checking names and shapes."""
    for name, t in named_tensors.items():
        if name not in loaded:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        arr = loaded[name]
        if tuple(arr.shape) != tuple(t.data.shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {t.data.shape}")
        t.data[...] = arr
    extra = set(loaded) - set(named_tensors)
    if extra:
        raise CheckpointError(f"checkpoint has unknown parameters: {sorted(extra)}")
