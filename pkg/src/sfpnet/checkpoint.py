"""Checkpoint container.

Layout (little-endian)::

    b"SFPK"  u32 version  u64 config_len  config bytes (UTF-8)
    u64 tensor_count
    repeated: u32 name_len, name, u8 dtype tag, u32 rank, rank x u64 dims, payload
    u64 CRC-32 of every preceding byte

Tensors are ``param/<name>``, ``adam_m/<name>``, ``adam_v/<name>`` for each
parameter in store order, plus the scalar ``optim/step``.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .autograd import Param, ParamStore
from .errors import FormatError

MAGIC = b"SFPK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS = {v: k for k, v in _DTYPES.items()}
_SLOTS = ("param", "adam_m", "adam_v")


def _tensor_bytes(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _TAGS:
        raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
    raw = name.encode()
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BI", _TAGS[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def dumps(store: ParamStore, config_text: str = "") -> bytes:
    tensors = []
    for name, p in store.params.items():
        for slot, arr in zip(_SLOTS, (p.value, p.m, p.v)):
            tensors.append(_tensor_bytes(f"{slot}/{name}", arr))
    tensors.append(_tensor_bytes("optim/step", np.array(store.step, dtype=np.int64)))
    cfg = config_text.encode()
    body = (MAGIC + struct.pack("<IQ", VERSION, len(cfg)) + cfg
            + struct.pack("<Q", len(tensors)) + b"".join(tensors))
    return body + struct.pack("<Q", zlib.crc32(body))


def save_checkpoint(path, store: ParamStore, config_text: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(store, config_text))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def loads(data: bytes):
    """``(config_text, store)``; raises FormatError on any corruption."""
    if len(data) < 8 + len(MAGIC):
        raise FormatError("checkpoint truncated")
    body, (crc,) = data[:-8], struct.unpack("<Q", data[-8:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint CRC mismatch")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, cfg_len = r.unpack("<IQ")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    config_text = r.take(cfg_len).decode()
    (count,) = r.unpack("<Q")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode()
        tag, rank = r.unpack("<BI")
        if tag not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}Q")
        dt = _DTYPES[tag]
        size = int(np.prod(dims)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(size), dtype=dt).reshape(dims).copy()
    if r.pos != len(body):
        raise FormatError("trailing bytes after tensor table")
    return config_text, _store_from(tensors)


def _store_from(tensors: dict) -> ParamStore:
    names = [k[len("param/"):] for k in tensors if k.startswith("param/")]
    if not names:
        raise FormatError("checkpoint holds no parameters")
    dtype = tensors[f"param/{names[0]}"].dtype.type
    store = ParamStore(dtype=np.dtype(dtype).newbyteorder("=").type,
                       step=int(tensors.get("optim/step", 0)))
    for name in names:
        try:
            value, m, v = (tensors[f"{slot}/{name}"] for slot in _SLOTS)
        except KeyError:
            raise FormatError(f"{name}: missing optimizer state") from None
        store.params[name] = Param(value, np.zeros_like(value), m, v)
    return store


def load_checkpoint(path):
    return loads(Path(path).read_bytes())
