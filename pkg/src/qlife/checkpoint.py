"""Self-describing binary checkpoints.

Layout::

    b"QLIFECKP" | u32 format version | u64 header length | JSON header
    | raw little-endian tensor blobs | 32-byte SHA-256 of everything before it

The JSON header carries the architecture descriptor, label map, training
metadata and, per tensor, its name, dtype, shape, offset and byte length.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import BackboneConfig, QualityModel

MAGIC = b"QLIFECKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


def _encode(model: QualityModel, metadata: dict | None) -> bytes:
    state = model.state_dict()
    tensors, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        tensors.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"config": asdict(model.config), "label_map": model.label_map, "architecture": model.describe(),
              "metadata": metadata or {}, "tensors": tensors}
    hb = json.dumps(header, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hb)) + hb + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: QualityModel, path: str | Path, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(_encode(model, metadata))
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Verify and decode a checkpoint into ``(header, tensors)``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} does not exist") from None
    if len(data) < _PREFIX.size + _DIGEST:
        raise ChecksumError(f"{path}: file is truncated ({len(data)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic {magic!r})")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupt or truncated")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, this build reads version {FORMAT_VERSION}")
    start = _PREFIX.size
    header = json.loads(body[start:start + hlen])
    blob = body[start + hlen:]
    tensors = {}
    for t in header["tensors"]:
        raw = blob[t["offset"]:t["offset"] + t["nbytes"]]
        if len(raw) != t["nbytes"]:
            raise CheckpointError(f"{path}: tensor {t['name']} runs past the end of the file")
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        tensors[t["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return header, tensors


def load_checkpoint(path: str | Path) -> tuple[QualityModel, dict]:
    """Rebuild the model saved at ``path``. Returns ``(model, metadata)``."""
    header, tensors = read_checkpoint(path)
    cfg = dict(header["config"])
    cfg["conv_channels"] = tuple(cfg["conv_channels"])
    cfg["spp_levels"] = tuple(cfg["spp_levels"])
    try:
        model = QualityModel(BackboneConfig(**cfg), header["label_map"])
        model.load_state_dict(tensors)
    except (TypeError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: checkpoint does not match the model architecture: {exc}") from None
    return model, header.get("metadata", {})
