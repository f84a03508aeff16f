"""Single-file checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"CAPGANCK"
    4 bytes   uint32 format version
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header: {"tree": ..., "tensors": [{dtype, shape, offset, nbytes}, ...]}
    ...       tensor payload, each blob little-endian, C order, at its recorded offset
    32 bytes  sha256 of everything above

The tree is the saved state with every tensor replaced by ``{"__tensor__": i}``.
Dict keys keep their int/str type and tuples stay tuples, so optimizer
state dicts survive the round trip.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Any

import numpy as np
import torch

from capgan.core.io import atomic_write_bytes

MAGIC = b"CAPGANCK"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.float16: "<f2",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.int16: "<i2",
    torch.int8: "|i1",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(state: Any, path: str | os.PathLike) -> None:
    blobs: list[bytes] = []
    specs: list[dict] = []
    offset = 0

    def encode(obj):
        nonlocal offset
        if isinstance(obj, torch.Tensor):
            t = obj.detach().cpu().contiguous()
            if t.dtype not in _DTYPES:
                raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
            data = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
            specs.append({"dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
            return {"__tensor__": len(specs) - 1}
        if isinstance(obj, dict):
            return {"__map__": [[_key(k), encode(v)] for k, v in obj.items()]}
        if isinstance(obj, tuple):
            return {"__tuple__": [encode(v) for v in obj]}
        if isinstance(obj, list):
            return [encode(v) for v in obj]
        if obj is None or isinstance(obj, (bool, int, float, str)):
            return obj
        raise CheckpointError(f"cannot serialize object of type {type(obj).__name__}")

    tree = encode(state)
    header = json.dumps({"tree": tree, "tensors": specs}).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)
    atomic_write_bytes(path, body + hashlib.sha256(body).digest())


def load_checkpoint(path: str | os.PathLike) -> Any:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _PREFIX.size + 32:
        raise CheckpointError(f"{path}: file is truncated ({len(data)} bytes)")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a capgan checkpoint")
    if version != VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version} cannot be read by this build (expects {VERSION})"
        )
    body, digest = data[:-32], data[-32:]
    start = _PREFIX.size + header_len
    if len(body) < start:
        raise CheckpointError(f"{path}: file is truncated inside the header")
    header = json.loads(body[_PREFIX.size:start].decode("utf-8"))
    payload = body[start:]
    expected = sum(s["nbytes"] for s in header["tensors"])
    if len(payload) != expected:
        raise CheckpointError(f"{path}: file is truncated (payload {len(payload)} of {expected} bytes)")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")

    tensors = []
    for s in header["tensors"]:
        arr = np.frombuffer(payload, dtype=np.dtype(s["dtype"]), count=int(np.prod(s["shape"], dtype=np.int64)),
                            offset=s["offset"]).reshape(s["shape"])
        tensors.append(torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True)).to(_TORCH[s["dtype"]]))

    def decode(obj):
        if isinstance(obj, dict):
            if "__tensor__" in obj:
                return tensors[obj["__tensor__"]]
            if "__map__" in obj:
                return {k: decode(v) for k, v in obj["__map__"]}
            if "__tuple__" in obj:
                return tuple(decode(v) for v in obj["__tuple__"])
        if isinstance(obj, list):
            return [decode(v) for v in obj]
        return obj

    return decode(header["tree"])


def _key(k):
    if isinstance(k, (bool, int, str)):
        return k
    raise CheckpointError(f"unsupported dict key type {type(k).__name__}")
