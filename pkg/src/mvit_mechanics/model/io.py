"""Weights as a flat little-endian float64 blob plus a JSON manifest."""

import json
from pathlib import Path

import numpy as np

from ..attention import SpecError
from .config import ModelConfig

SCHEMA = "mvit_mechanics.weights"
SCHEMA_VERSION = 1


def save_weights(model, path):
    """Write ``<path>.bin`` and ``<path>.json``; returns the manifest."""
    path = Path(path)
    tensors, offset = [], 0
    chunks = []
    for name, t in model.named_tensors().items():
        tensors.append({"name": name, "offset": offset, "shape": list(t.shape)})
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").ravel())
        offset += t.size
    manifest = {"schema": SCHEMA, "version": SCHEMA_VERSION, "dtype": "<f8", "count": offset,
                "config": model.config.to_dict(), "tensors": tensors}
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    path.with_suffix(".bin").write_bytes(blob.tobytes())
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_weights(path):
    """Rebuild the network described by ``<path>.json`` and fill it from ``<path>.bin``."""
    from .network import MViT

    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("schema") != SCHEMA or manifest.get("version") != SCHEMA_VERSION:
        raise SpecError(f"unsupported weights manifest {manifest.get('schema')!r} v{manifest.get('version')!r}")
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype=manifest["dtype"])
    if blob.size != manifest["count"]:
        raise SpecError(f"blob holds {blob.size} values, manifest expects {manifest['count']}")
    model = MViT(ModelConfig.from_dict(manifest["config"]))
    current = model.named_tensors()
    if {t["name"] for t in manifest["tensors"]} != set(current):
        raise SpecError("manifest tensor names do not match the configured network")
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        data = blob[entry["offset"]:entry["offset"] + n].astype(np.float64).reshape(shape)
        if current[entry["name"]].shape != shape:
            raise SpecError(f"{entry['name']}: manifest shape {shape} != {current[entry['name']].shape}")
        current[entry["name"]].data = data.copy()
    return model
