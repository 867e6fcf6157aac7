"""Versioned single-file checkpoints.

Layout::

    b"SVCK" | u32 version | u64 header length | JSON header | payload

The header's ``tensors`` manifest maps each name to shape, dtype and byte
offset into the payload; tensors are stored raw, little-endian, row-major.
``crc32`` covers the payload.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

MAGIC = b"SVCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    step: int = 0
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def params(self) -> dict[str, np.ndarray]:
        return {k[len("param."):]: v for k, v in self.tensors.items() if k.startswith("param.")}

    def optimizer(self) -> dict[str, np.ndarray]:
        return {k[len("opt."):]: v for k, v in self.tensors.items() if k.startswith("opt.")}


def save(path: Union[str, Path], ckpt: Checkpoint) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"version": ckpt.version, "step": int(ckpt.step), "meta": ckpt.meta,
              "crc32": zlib.crc32(payload), "payload_bytes": len(payload), "tensors": entries}
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, ckpt.version, len(hdr)))
        fh.write(hdr)
        fh.write(payload)
    tmp.replace(path)


def load(path: Union[str, Path]) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = blob[start:]
    if len(payload) != header["payload_bytes"] or zlib.crc32(payload) != header["crc32"]:
        raise CheckpointError(f"{path}: payload corrupt or truncated")
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return Checkpoint(tensors, header["step"], header["meta"], version)


def from_training(model, opt=None, step: int = 0, meta: Optional[dict] = None) -> Checkpoint:
    tensors = {f"param.{k}": v for k, v in model.state_dict().items()}
    if opt is not None:
        tensors.update({f"opt.{k}": v for k, v in opt.state_arrays().items()})
    meta = dict(meta or {})
    meta.setdefault("model_config", model.config.to_dict())
    meta.setdefault("dtype", np.dtype(model.dtype).name)
    return Checkpoint(tensors, step, meta)


def restore_model(ckpt: Checkpoint):
    """Rebuild the model described by the checkpoint and load its weights."""
    from .model import ModelConfig, build

    cfg = ModelConfig.from_dict(ckpt.meta["model_config"])
    model = build(cfg, dtype=np.dtype(ckpt.meta.get("dtype", "float32")))
    model.load_state_dict(ckpt.params())
    return model
