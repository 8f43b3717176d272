"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"IPRC"  u32 version  u64 epoch
    params section   : u32 count, then tensors
    masks section    : u32 count, then tensors
    optimizer meta   : u32 length, JSON (empty object when absent)
    optimizer buffers: u32 count, then tensors named "<buffer>/<index>"
    rng              : u32 length, JSON
    schedule         : u32 length, JSON
    u32 CRC32 of every preceding byte

A tensor is ``u32 name_len, utf-8 name, u8 dtype tag, u32 rank,
u64 dims[rank], raw data``.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, IntegrityError
from .numerics import OptimizerState

MAGIC = b"IPRC"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2}


@dataclass
class Checkpoint:
    epoch: int
    params: dict
    optimizer: Optional[OptimizerState] = None
    rng: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)


def _put_tensor(out: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _TAGS:
        raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
    raw = name.encode()
    out.write(struct.pack("<I", len(raw)) + raw)
    out.write(struct.pack("<BI", _TAGS[arr.dtype], arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    out.write(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes())


def _put_tensors(out, tensors: dict) -> None:
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        _put_tensor(out, name, arr)


def _put_json(out, obj) -> None:
    raw = json.dumps(obj, sort_keys=True).encode()
    out.write(struct.pack("<I", len(raw)) + raw)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self):
        (n,) = self.unpack("<I")
        name = self.take(n).decode()
        tag, rank = self.unpack("<BI")
        if tag not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype tag {tag}")
        dims = self.unpack(f"<{rank}Q") if rank else ()
        dt = _DTYPES[tag]
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(dims)
        return name, arr.astype(dt.newbyteorder("="), copy=True)

    def tensors(self) -> dict:
        (count,) = self.unpack("<I")
        return dict(self.tensor() for _ in range(count))

    def json(self):
        (n,) = self.unpack("<I")
        return json.loads(self.take(n).decode())


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<IQ", VERSION, ckpt.epoch))
    _put_tensors(out, ckpt.params)
    _put_tensors(out, ckpt.masks)
    opt = ckpt.optimizer
    _put_json(out, opt.hyperparams() if opt is not None else {})
    bufs = {}
    if opt is not None:
        for bname, arrs in opt.buffers.items():
            for i, a in enumerate(arrs):
                bufs[f"{bname}/{i}"] = a
    _put_tensors(out, bufs)
    _put_json(out, ckpt.rng)
    _put_json(out, ckpt.schedule)
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 20 or buf[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise IntegrityError("checkpoint CRC mismatch")
    r = _Reader(buf[:-4])
    r.take(4)
    version, epoch = r.unpack("<IQ")
    if version != VERSION:
        raise FormatError(f"checkpoint version {version} unsupported (expected {VERSION})")
    params = r.tensors()
    masks = r.tensors()
    meta = r.json()
    bufs = r.tensors()
    opt = None
    if meta:
        opt = OptimizerState(**meta)
        grouped: dict = {}
        for key, arr in bufs.items():
            bname, idx = key.rsplit("/", 1)
            grouped.setdefault(bname, {})[int(idx)] = arr
        opt.buffers = {b: [d[i] for i in range(len(d))] for b, d in grouped.items()}
    rng = r.json()
    schedule = r.json()
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes in checkpoint")
    return Checkpoint(epoch, params, opt, rng, schedule, masks)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
