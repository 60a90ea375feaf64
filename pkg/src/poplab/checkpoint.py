"""Checkpoint file: magic, u32 LE header length, JSON header, raw <f8 data.

Header keys are the config fields plus ``tensors``: a list of
``{name, shape, offset, count}`` where ``offset`` is a byte offset from the
start of the data section.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .model import ModelConfig, ModelWeights, expected_shapes

MAGIC = b"POPCKPT1"


def save_checkpoint(weights: ModelWeights, config: ModelConfig, path) -> None:
    tensors, blobs, offset = [], [], 0
    for name, arr in weights.named_arrays():
        a = np.ascontiguousarray(arr, dtype="<f8")
        tensors.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = dict(config.to_dict())
    header["tensors"] = tensors
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Returns ``(weights, config)``; raises FormatError on any inconsistency."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if 12 + hlen > len(raw):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    manifest = header.pop("tensors", None)
    if not isinstance(manifest, list):
        raise FormatError(f"{path}: header has no tensor manifest")
    try:
        config = ModelConfig.from_dict(header)
    except (ConfigError, TypeError) as exc:
        raise FormatError(f"{path}: bad config in header ({exc})") from exc
    data = memoryview(raw)[12 + hlen :]
    want = expected_shapes(config)
    arrays = {}
    for entry in manifest:
        name = entry.get("name")
        shape = tuple(entry.get("shape", ()))
        count, offset = entry.get("count"), entry.get("offset")
        if name not in want:
            raise FormatError(f"{path}: unexpected tensor {name!r}")
        if shape != want[name]:
            raise FormatError(f"{path}: tensor {name!r} has shape {shape}, config implies {want[name]}")
        if count != int(np.prod(shape)):
            raise FormatError(f"{path}: tensor {name!r} count {count} does not match shape {shape}")
        if not isinstance(offset, int) or offset < 0 or offset + 8 * count > len(data):
            raise FormatError(f"{path}: tensor {name!r} data is truncated or out of range")
        arrays[name] = np.frombuffer(data[offset : offset + 8 * count], dtype="<f8").astype(np.float64).reshape(shape)
    missing = set(want) - set(arrays)
    if missing:
        raise FormatError(f"{path}: missing tensors {sorted(missing)[:3]}")
    return ModelWeights.from_named(config, arrays), config


def model_hash(weights: ModelWeights) -> str:
    """sha256 over the config JSON and every tensor's bytes."""
    h = hashlib.sha256(json.dumps(weights.config.to_dict(), sort_keys=True).encode())
    for name, arr in weights.named_arrays():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
