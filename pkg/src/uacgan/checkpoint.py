"""Single-file checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7     magic  b"UACGCKPT"
    bytes 8..11    uint32 format version (1)
    bytes 12..19   uint64 manifest length M
    next M bytes   UTF-8 JSON manifest
    remainder      raw tensor bytes, little-endian, C order

The manifest holds ``tensors`` (a list of ``{name, dtype, shape, offset,
nbytes}`` with offsets relative to the start of the tensor section) plus
free-form ``meta`` (step, config, config hash, EMA state, ...).
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"UACGCKPT"
VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), allow_nan=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def save(path, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        code = _DTYPES[t.dtype]
        raw = t.numpy().astype(code, copy=False).tobytes(order="C")
        entries.append({"name": name, "dtype": code, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(manifest)))
        f.write(manifest)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load(path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 20:
        raise CheckpointError(f"{path}: truncated header")
    version, mlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    manifest = json.loads(data[20:20 + mlen])
    base = 20 + mlen
    tensors = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise CheckpointError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=start).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return tensors, manifest["meta"]
