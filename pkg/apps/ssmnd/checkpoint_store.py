"""
Checkpoint persistence.

A checkpoint is a directory holding `model.json` (the ModelConfig), `manifest.json`
(name -> shape, dtype, byte offset) and `weights.bin` (contiguous little-endian tensors,
row-major, in manifest order). Manifests are validated against the shared JSON Schema.
"""

import json
import logging
import os
import shutil
import threading
from pathlib import Path
from typing import Optional, Union

import jsonschema
import numpy as np

from config import get_settings
from core.errors import CheckpointError
from models import ModelConfig

logger = logging.getLogger("ssmnd.checkpoint_store")

FORMAT = "ssmnd-checkpoint"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _schema() -> dict:
    path = os.path.join(get_settings().schemas_dir, "checkpoint-manifest.schema.json")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def build_manifest(params: dict[str, np.ndarray], dtype: str) -> dict:
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported checkpoint dtype '{dtype}'", field="dtype")
    itemsize = np.dtype(_DTYPES[dtype]).itemsize
    tensors, offset = [], 0
    for name, value in params.items():
        shape = list(np.shape(value))
        nbytes = int(np.prod(shape, dtype=np.int64)) * itemsize
        tensors.append({"name": name, "shape": shape, "offset": offset, "nbytes": nbytes})
        offset += nbytes
    return {
        "format": FORMAT,
        "version": VERSION,
        "dtype": dtype,
        "byte_order": "little",
        "total_bytes": offset,
        "tensors": tensors,
    }


def validate_manifest(manifest: dict, blob_size: Optional[int] = None) -> None:
    try:
        jsonschema.validate(manifest, _schema())
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or None
        raise CheckpointError(f"invalid manifest: {exc.message}", field=path) from exc
    names = [t["name"] for t in manifest["tensors"]]
    if len(set(names)) != len(names):
        raise CheckpointError("manifest lists a tensor more than once", field="tensors")
    itemsize = np.dtype(_DTYPES[manifest["dtype"]]).itemsize
    expected = 0
    for t in manifest["tensors"]:
        if t["offset"] != expected or t["nbytes"] != int(np.prod(t["shape"], dtype=np.int64)) * itemsize:
            raise CheckpointError(f"tensor '{t['name']}' is not laid out contiguously", field="tensors")
        expected += t["nbytes"]
    if expected != manifest["total_bytes"]:
        raise CheckpointError("total_bytes does not match the tensor table", field="total_bytes")
    if blob_size is not None and blob_size != expected:
        raise CheckpointError(f"weights.bin holds {blob_size} bytes, manifest expects {expected}")


def save_checkpoint(
    path: Union[str, Path], config: ModelConfig, params: dict[str, np.ndarray], dtype: Optional[str] = None
) -> Path:
    path = Path(path)
    dtype = dtype or get_settings().checkpoint_dtype
    manifest = build_manifest(params, dtype)
    validate_manifest(manifest)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "weights.bin", "wb") as f:
        for value in params.values():
            f.write(np.ascontiguousarray(value, dtype=_DTYPES[dtype]).tobytes())
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    (path / "model.json").write_text(config.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"Saved checkpoint {path} ({len(params)} tensors, {manifest['total_bytes']} bytes)")
    return path


def load_checkpoint(path: Union[str, Path]) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Parameters come back as float64 arrays in manifest order."""
    path = Path(path)
    for required in ("manifest.json", "weights.bin", "model.json"):
        if not (path / required).is_file():
            raise CheckpointError(f"{path} is missing {required}", field=required)
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    blob = (path / "weights.bin").read_bytes()
    validate_manifest(manifest, len(blob))
    config = ModelConfig.model_validate_json((path / "model.json").read_text(encoding="utf-8"))
    dtype = np.dtype(_DTYPES[manifest["dtype"]])
    params = {}
    for t in manifest["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        values = np.frombuffer(blob, dtype=dtype, count=count, offset=t["offset"])
        params[t["name"]] = values.astype(np.float64).reshape(t["shape"])
    return config, params


class CheckpointStore:
    """Thread-safe store of named checkpoints under one directory."""

    def __init__(self, root: Union[str, Path, None] = None):
        self.root = Path(root or get_settings().runs_dir) / "checkpoints"
        self._lock = threading.Lock()

    @staticmethod
    def is_valid_name(name: str) -> bool:
        return bool(name) and "/" not in name and os.sep not in name and not name.startswith(".")

    def path(self, name: str) -> Path:
        if not self.is_valid_name(name):
            raise CheckpointError(f"invalid checkpoint name '{name}'", field="name")
        return self.root / name

    def save(
        self, name: str, config: ModelConfig, params: dict[str, np.ndarray], dtype: Optional[str] = None
    ) -> Path:
        """Store a checkpoint, replacing any previous one of the same name."""
        with self._lock:
            target = self.path(name)
            if target.exists():
                shutil.rmtree(target)
            return save_checkpoint(target, config, params, dtype)

    def get(self, name: str) -> Optional[tuple[ModelConfig, dict[str, np.ndarray]]]:
        """Load a checkpoint by name, None when it does not exist."""
        with self._lock:
            target = self.path(name)
            if not target.exists():
                return None
            return load_checkpoint(target)

    def list_all(self) -> list[str]:
        with self._lock:
            if not self.root.exists():
                return []
            return sorted(p.name for p in self.root.iterdir() if (p / "manifest.json").is_file())

    def delete(self, name: str) -> bool:
        """Delete a checkpoint. Returns True if it existed."""
        with self._lock:
            target = self.path(name)
            if target.exists():
                shutil.rmtree(target)
                return True
            return False
