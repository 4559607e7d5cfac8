"""Scan records and their binary point/label files.

Point file: ``b"SFPC"``, u32 version, u64 count, then ``count x 4`` float32
``(x, y, z, intensity)``.  Label file: ``b"SFPL"``, u32 version, u64 count,
then ``count`` u32 whose low 16 bits hold the class id (``0xFFFF`` = ignore).
Everything is little-endian.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError, InputError

IGNORE = 255
POINT_MAGIC = b"SFPC"
LABEL_MAGIC = b"SFPL"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_IGNORE_WIRE = 0xFFFF


@dataclass
class ScanRecord:
    points: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2 or self.points.shape[1] != 4:
            raise InputError(f"points must be (N, 4), got {self.points.shape}")
        if self.labels.shape != (self.points.shape[0],):
            raise InputError("one label per point required")

    def __len__(self) -> int:
        return self.points.shape[0]

    def check_labels(self, num_classes: int) -> None:
        bad = (self.labels != IGNORE) & ((self.labels < 0) | (self.labels >= num_classes))
        if bad.any():
            raise InputError(f"label outside [0, {num_classes}) and not ignore")


def label_path_for(points_path) -> Path:
    return Path(points_path).with_suffix(".sfpl")


def save_scan(scan: ScanRecord, path) -> tuple:
    """Write ``path`` (points) and its ``.sfpl`` sibling (labels)."""
    path = Path(path)
    lpath = label_path_for(path)
    n = len(scan)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(POINT_MAGIC, VERSION, n))
        fh.write(scan.points.astype("<f4").tobytes())
    wire = np.where(scan.labels == IGNORE, _IGNORE_WIRE, scan.labels).astype("<u4")
    with open(lpath, "wb") as fh:
        fh.write(_HEADER.pack(LABEL_MAGIC, VERSION, n))
        fh.write(wire.tobytes())
    return path, lpath


def _read(path, magic, itemsize, per_item):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    got, version, count = _HEADER.unpack_from(data)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + count * itemsize * per_item
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    return data[_HEADER.size:], count


def load_scan(path, label_path=None) -> ScanRecord:
    path = Path(path)
    payload, n = _read(path, POINT_MAGIC, 4, 4)
    if n == 0:
        raise FormatError(f"{path}: scan has no points")
    points = np.frombuffer(payload, dtype="<f4").reshape(n, 4).astype(np.float32)
    lpath = Path(label_path) if label_path is not None else label_path_for(path)
    lpayload, nl = _read(lpath, LABEL_MAGIC, 4, 1)
    if nl != n:
        raise FormatError(f"{lpath}: {nl} labels for {n} points")
    wire = np.frombuffer(lpayload, dtype="<u4") & 0xFFFF
    labels = np.where(wire == _IGNORE_WIRE, IGNORE, wire).astype(np.int64)
    return ScanRecord(points, labels, {"path": str(path)})
