"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"HGNNCKPT"  u32 version  u32 header_len  header (UTF-8 JSON)
    u32 n_records
    per record: u8 kind (0 = param, 1 = buffer)  u16 key_len  key
                u8 ndim  u32 dims[ndim]  float64-LE data

The JSON header carries the backbone config plus free-form metadata and is
serialised with sorted keys, so equal inputs give byte-identical files.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict

import numpy as np

from .backbones import BackboneParams, MGMConfig
from .data import atomic_write_bytes
from .tensor import Tensor

__all__ = ["CheckpointError", "MAGIC", "VERSION", "dumps", "loads", "save_checkpoint", "load_checkpoint"]

MAGIC = b"HGNNCKPT"
VERSION = 1
_LE_F8 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def _record(kind: int, key: str, arr: np.ndarray) -> bytes:
    kb = key.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype=_LE_F8)
    head = struct.pack("<BH", kind, len(kb)) + kb + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def dumps(params: BackboneParams, cfg: MGMConfig, meta: dict | None = None) -> bytes:
    header = json.dumps({"config": cfg.to_dict(), "meta": meta or {}}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    parts.append(struct.pack("<I", len(params) + len(params.buffers)))
    parts.extend(_record(0, k, t.data) for k, t in params.items())
    parts.extend(_record(1, k, b) for k, b in params.buffers.items())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint is truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(blob: bytes) -> tuple[BackboneParams, MGMConfig, dict]:
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    (count,) = r.unpack("<I")
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    buffers: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        kind, klen = r.unpack("<BH")
        key = r.take(klen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(8 * n), dtype=_LE_F8).astype(np.float64).reshape(shape)
        if kind == 0:
            tensors[key] = Tensor(arr, requires_grad=True, name=key)
        elif kind == 1:
            buffers[key] = arr
        else:
            raise CheckpointError(f"unknown record kind {kind} for {key!r}")
    if r.pos != len(blob):
        raise CheckpointError("trailing bytes after the last record")
    cfg = MGMConfig.from_dict(header["config"])
    return BackboneParams(tensors, buffers), cfg, header.get("meta", {})


def save_checkpoint(path, params: BackboneParams, cfg: MGMConfig, meta: dict | None = None) -> None:
    atomic_write_bytes(path, dumps(params, cfg, meta))


def load_checkpoint(path) -> tuple[BackboneParams, MGMConfig, dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())
