"""Binary checkpoint format.

Layout::

    b"DTKT" | u32 version | u32 metadata length | metadata JSON (UTF-8) | payload

All integers little-endian.  The metadata holds the model config, write mode,
free-form extras and a manifest of ``{name, shape, offset, nbytes}`` where
``offset`` is relative to the start of the payload.  Payloads are raw
little-endian float32 arrays in manifest order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .model import ModelConfig, WriteMode
from .numkernel import ParamStore, Tensor

MAGIC = b"DTKT"
VERSION = 1
_HEADER = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ParamStore
    config: ModelConfig
    mode: WriteMode = WriteMode.ADD_ERASE
    extra: dict[str, Any] = field(default_factory=dict)


def encode_checkpoint(params: ParamStore, config: ModelConfig, mode=WriteMode.ADD_ERASE, extra=None) -> bytes:
    shapes = config.param_shapes()
    manifest = []
    blobs = []
    offset = 0
    for name, shape in shapes.items():
        arr = params[name].data
        if arr.shape != shape:
            raise CheckpointError(f"parameter {name!r} has shape {arr.shape}, config expects {shape}")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    meta = {
        "config": asdict(config),
        "mode": WriteMode(mode).value,
        "manifest": manifest,
        "extra": extra or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(meta_bytes)) + meta_bytes + b"".join(blobs)


def save_checkpoint(params: ParamStore, config: ModelConfig, path, mode=WriteMode.ADD_ERASE, extra=None) -> Path:
    path = Path(path)
    data = encode_checkpoint(params, config, mode, extra)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, meta_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r} ('DTKT')")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    start = _HEADER.size
    if len(data) < start + meta_len:
        raise CheckpointError("truncated metadata block")
    try:
        meta = json.loads(data[start : start + meta_len].decode("utf-8"))
        config = ModelConfig(**meta["config"])
        mode = WriteMode(meta["mode"])
        manifest = meta["manifest"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt metadata: {exc}") from None
    payload = memoryview(data)[start + meta_len :]
    expected = config.param_shapes()
    if [m.get("name") for m in manifest] != list(expected):
        raise CheckpointError("manifest parameter names do not match the model config")
    total = sum(int(m["nbytes"]) for m in manifest)
    if len(payload) != total:
        raise CheckpointError(f"payload holds {len(payload)} bytes, manifest declares {total}")
    params = {}
    for m in manifest:
        shape = tuple(m["shape"])
        if shape != expected[m["name"]] or int(m["nbytes"]) != 4 * int(np.prod(shape)):
            raise CheckpointError(f"manifest entry for {m['name']!r} is inconsistent")
        off = int(m["offset"])
        arr = np.frombuffer(payload[off : off + int(m["nbytes"])], dtype="<f4").reshape(shape)
        params[m["name"]] = Tensor(arr.astype(np.float32), dtype=np.float32)
    return Checkpoint(ParamStore(params), config, mode, meta.get("extra", {}))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
