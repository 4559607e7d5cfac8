"""Sparse voxel tensors, voxelization, rulebooks and devoxelization.

Coordinates are stored as an ``(N, 4)`` int32 array with columns
``(batch, x, y, z)``.  Rows are always sorted lexicographically by
``(batch, z, y, x)``; that order defines row identity for every operator.
Kernel offsets are enumerated in ``(dz, dy, dx)`` lexicographic order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np

from . import _backend
from ._grid import kernel_offsets, pack_keys
from .errors import ConfigError, ConsistencyError, ContractError, InputError, RangeError

INT32_MIN = np.iinfo(np.int32).min
INT32_MAX = np.iinfo(np.int32).max


class VoxelCoord(NamedTuple):
    x: int
    y: int
    z: int
    batch: int = 0


def sort_order(coords: np.ndarray) -> np.ndarray:
    """Permutation sorting ``coords`` by (batch, z, y, x)."""
    coords = np.asarray(coords)
    return np.lexsort((coords[:, 1], coords[:, 2], coords[:, 3], coords[:, 0]))


def as_coords(coords) -> np.ndarray:
    """Validate and convert to a C-contiguous ``(N, 4)`` int32 array."""
    arr = np.asarray(coords)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ContractError(f"coords must have shape (N, 4), got {arr.shape}")
    if arr.dtype != np.int32:
        wide = arr.astype(np.int64)
        if wide.size and (wide.min() < INT32_MIN or wide.max() > INT32_MAX):
            raise RangeError("voxel coordinate outside 32-bit signed range")
        if wide.size and wide[:, 0].min() < 0:
            raise ContractError("batch index must be non-negative")
        arr = wide.astype(np.int32)
    return np.ascontiguousarray(arr)


@dataclass(frozen=True, eq=False)
class SparseTensor:
    """Sorted, duplicate-free voxel coordinates with row-aligned features.

    ``features`` is either an ndarray or an autograd ``Var``; operators only
    require that it exposes ``shape``.
    """

    coords: np.ndarray
    features: Any
    stride: int = 1

    def __post_init__(self):
        coords = as_coords(self.coords)
        object.__setattr__(self, "coords", coords)
        if self.stride < 1:
            raise ContractError("stride must be a positive integer")
        if coords.shape[0] != self.features.shape[0]:
            raise ContractError(
                f"{coords.shape[0]} coords but {self.features.shape[0]} feature rows")

    @classmethod
    def from_unsorted(cls, coords, features, stride: int = 1) -> "SparseTensor":
        coords = as_coords(coords)
        order = sort_order(coords)
        coords = coords[order]
        if has_duplicates(coords):
            raise ContractError("duplicate voxel coordinates")
        return cls(coords, np.asarray(features)[order], stride)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]

    @property
    def batch(self) -> np.ndarray:
        return self.coords[:, 0]

    def replace(self, features) -> "SparseTensor":
        """Same coordinates, new row-aligned features."""
        return SparseTensor(self.coords, features, self.stride)

    def shifted(self, offset) -> "SparseTensor":
        """Translate every voxel by an integer ``(dx, dy, dz)`` offset."""
        delta = np.zeros(4, dtype=np.int64)
        delta[1:] = np.asarray(offset, dtype=np.int64)
        return SparseTensor(as_coords(self.coords.astype(np.int64) + delta),
                            self.features, self.stride)

    def is_sorted(self) -> bool:
        if len(self) < 2:
            return True
        order = sort_order(self.coords)
        return bool(np.all(order == np.arange(len(self)))) and not has_duplicates(self.coords)


def has_duplicates(sorted_coords: np.ndarray) -> bool:
    if sorted_coords.shape[0] < 2:
        return False
    return bool(np.any(np.all(sorted_coords[1:] == sorted_coords[:-1], axis=1)))


# ---------------------------------------------------------------------------
# voxelization


@dataclass(frozen=True, eq=False)
class VoxelMap:
    """Point-to-voxel surjection produced by :func:`voxelize`."""

    point_to_voxel: np.ndarray
    voxel_point_count: np.ndarray

    @property
    def num_points(self) -> int:
        return self.point_to_voxel.shape[0]


def voxelize(points, voxel_size: float, batch: int = 0):
    """Quantize ``(x, y, z, intensity)`` points into a :class:`SparseTensor`.

    Each voxel carries the mean of its points' ``(dx, dy, dz, intensity)``,
    where the offsets are relative to the voxel centre in units of
    ``voxel_size`` (so they lie in ``[-0.5, 0.5]``).  Points are summed in a
    canonical order, which makes the result independent of input order.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise InputError(f"points must have shape (N, 4), got {pts.shape}")
    if pts.shape[0] == 0:
        raise InputError("cannot voxelize an empty point set")
    if not (voxel_size > 0 and np.isfinite(voxel_size)):
        raise InputError("voxel_size must be a positive finite number")
    if batch < 0:
        raise InputError("batch index must be non-negative")
    if not np.all(np.isfinite(pts)):
        raise InputError("point coordinates must be finite")

    scaled = pts[:, :3] / voxel_size
    cell = np.floor(scaled)
    if cell.min() < INT32_MIN or cell.max() > INT32_MAX:
        raise RangeError("voxel coordinate overflows 32-bit signed range")
    cell_i = cell.astype(np.int64)
    rel = scaled - (cell + 0.5)

    n = pts.shape[0]
    coords_all = np.empty((n, 4), dtype=np.int64)
    coords_all[:, 0] = batch
    coords_all[:, 1:] = cell_i
    # voxel-major, then by point values so summation order is canonical
    order = np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0],
                        coords_all[:, 1], coords_all[:, 2], coords_all[:, 3]))
    sc = coords_all[order]
    new_voxel = np.ones(n, dtype=bool)
    new_voxel[1:] = np.any(sc[1:] != sc[:-1], axis=1)
    starts = np.flatnonzero(new_voxel)
    voxel_of_sorted = np.cumsum(new_voxel) - 1

    vals = np.empty((n, 4), dtype=np.float64)
    vals[:, :3] = rel[order]
    vals[:, 3] = pts[order, 3]
    counts = np.diff(np.append(starts, n))
    sums = np.add.reduceat(vals, starts, axis=0)
    feats = sums / counts[:, None]

    point_to_voxel = np.empty(n, dtype=np.int64)
    point_to_voxel[order] = voxel_of_sorted
    tensor = SparseTensor(as_coords(sc[starts]), feats, 1)
    return tensor, VoxelMap(point_to_voxel, counts.astype(np.int64))


def concat_batches(tensors, maps=None):
    """Stack single-scan tensors into one block-diagonal batch.

    Scan ``b`` is relabelled to batch index ``b``.  When ``maps`` is given the
    voxel maps are offset to index the stacked rows and returned too.
    """
    coords, feats, offsets = [], [], [0]
    for b, t in enumerate(tensors):
        c = t.coords.copy()
        c[:, 0] = b
        coords.append(c)
        feats.append(np.asarray(t.features))
        offsets.append(offsets[-1] + len(t))
    stride = tensors[0].stride
    out = SparseTensor(np.concatenate(coords), np.concatenate(feats), stride)
    if maps is None:
        return out
    merged = VoxelMap(
        np.concatenate([m.point_to_voxel + off for m, off in zip(maps, offsets)]),
        np.concatenate([m.voxel_point_count for m in maps]))
    return out, merged


def devoxelize(tensor: SparseTensor, vmap: VoxelMap) -> np.ndarray:
    """Per-point feature rows: point ``p`` receives ``features[point_to_voxel[p]]``."""
    check_voxel_map(len(tensor), vmap)
    return np.asarray(tensor.features)[vmap.point_to_voxel]


def check_voxel_map(num_rows: int, vmap: VoxelMap) -> None:
    idx = vmap.point_to_voxel
    if idx.size == 0:
        if num_rows:
            raise ConsistencyError("empty voxel map for a non-empty tensor")
        return
    if idx.min() < 0 or idx.max() >= num_rows:
        raise ConsistencyError("voxel map row index out of bounds")
    if int(vmap.voxel_point_count.sum()) != idx.shape[0]:
        raise ConsistencyError("voxel point counts do not sum to the number of points")


# ---------------------------------------------------------------------------
# rulebooks


@dataclass(eq=False)
class Rulebook:
    """Per-offset ``(input_row, output_row)`` pairs driving a sparse convolution.

    Pairs are stored offset-major: the pairs of offset ``d`` are
    ``in_idx[ptr[d]:ptr[d+1]]`` / ``out_idx[ptr[d]:ptr[d+1]]``.  ``stride`` is
    1 for submanifold rulebooks; for strided ones the offsets are the child
    positions ``(0..s-1)**3`` inside each parent cell.
    """

    kernel_size: int
    stride: int
    offsets: np.ndarray
    ptr: np.ndarray
    in_idx: np.ndarray
    out_idx: np.ndarray
    in_coords: np.ndarray
    out_coords: np.ndarray
    transposed: bool = False
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def num_offsets(self) -> int:
        return self.offsets.shape[0]

    @property
    def n_in(self) -> int:
        return self.in_coords.shape[0]

    @property
    def n_out(self) -> int:
        return self.out_coords.shape[0]

    @property
    def num_pairs(self) -> int:
        return int(self.ptr[-1])

    @property
    def submanifold(self) -> bool:
        return self.stride == 1 and not self.transposed

    def pairs(self, d: int):
        s, e = self.ptr[d], self.ptr[d + 1]
        return self.in_idx[s:e], self.out_idx[s:e]

    def offset_id(self, offset) -> int:
        """Index of the ``(dx, dy, dz)`` offset (child position when strided)."""
        hit = np.flatnonzero(np.all(self.offsets == np.asarray(offset), axis=1))
        if hit.size == 0:
            raise KeyError(f"offset {tuple(offset)} not in this rulebook")
        return int(hit[0])

    def offset_index(self) -> np.ndarray:
        """Offset id of every pair, aligned with ``in_idx``/``out_idx``."""
        if "off" not in self._cache:
            self._cache["off"] = np.repeat(
                np.arange(self.num_offsets, dtype=np.int64), np.diff(self.ptr))
        return self._cache["off"]

    def output_major(self):
        """CSR over output rows: ``(row_ptr, in_idx, offset)`` sorted by (out, offset)."""
        if "out_major" not in self._cache:
            self._cache["out_major"] = _csr(self.out_idx, self.in_idx,
                                            self.offset_index(), self.n_out)
        return self._cache["out_major"]

    def input_major(self):
        """CSR over input rows: ``(row_ptr, out_idx, offset)`` sorted by (in, offset)."""
        if "in_major" not in self._cache:
            self._cache["in_major"] = _csr(self.in_idx, self.out_idx,
                                           self.offset_index(), self.n_in)
        return self._cache["in_major"]

    def transpose(self) -> "Rulebook":
        """Swap input and output roles (the scatter plan of the inverse op)."""
        key = "transpose"
        if key not in self._cache:
            t = Rulebook(self.kernel_size, self.stride, self.offsets, self.ptr,
                         self.out_idx, self.in_idx, self.out_coords, self.in_coords,
                         not self.transposed)
            t._cache[key] = self
            self._cache[key] = t
        return self._cache[key]

    def matches(self, coords: np.ndarray) -> bool:
        return (coords.shape == self.in_coords.shape
                and (coords is self.in_coords or np.array_equal(coords, self.in_coords)))


def _csr(row, col, off, n_rows):
    order = np.lexsort((off, row))
    counts = np.bincount(row, minlength=n_rows)
    ptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return ptr, np.ascontiguousarray(col[order]), np.ascontiguousarray(off[order])


def build_rulebook(tensor: SparseTensor, kernel_size: int, mode="submanifold") -> Rulebook:
    """Build the pair lists for a submanifold or strided convolution.

    ``mode`` is ``"submanifold"`` or ``("strided", s)``.  Strided rulebooks
    use ``kernel_size == s`` so every child lands on exactly one offset.
    """
    coords = tensor.coords if isinstance(tensor, SparseTensor) else as_coords(tensor)
    if isinstance(mode, str) and mode == "submanifold":
        return submanifold_rulebook(coords, kernel_size)
    if isinstance(mode, tuple) and len(mode) == 2 and mode[0] == "strided":
        s = int(mode[1])
        if kernel_size != s:
            raise ConfigError(f"strided({s}) rulebook needs kernel_size {s}, got {kernel_size}")
        return strided_rulebook(coords, s)
    raise ConfigError(f"unknown rulebook mode {mode!r}")


def submanifold_rulebook(coords: np.ndarray, kernel_size: int) -> Rulebook:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"submanifold kernel size must be odd and positive, got {kernel_size}")
    coords = as_coords(coords)
    order = sort_order(coords)
    if np.array_equal(order, np.arange(order.size)):
        ptr, in_idx, out_idx = _backend.kernels.submanifold_pairs(coords, kernel_size)
    else:  # kernels expect canonical order; map the pairs back to caller rows
        ptr, in_idx, out_idx = _backend.kernels.submanifold_pairs(
            np.ascontiguousarray(coords[order]), kernel_size)
        in_idx, out_idx = order[in_idx], order[out_idx]
    return Rulebook(kernel_size, 1, kernel_offsets(kernel_size), ptr, in_idx, out_idx,
                    coords, coords)


def strided_rulebook(coords: np.ndarray, stride: int) -> Rulebook:
    if stride < 1:
        raise ConfigError("stride must be positive")
    coords = as_coords(coords)
    n = coords.shape[0]
    parent = coords.astype(np.int64)
    parent[:, 1:] = np.floor_divide(parent[:, 1:], stride)
    child = coords[:, 1:].astype(np.int64) - parent[:, 1:] * stride
    off = (child[:, 2] * stride + child[:, 1]) * stride + child[:, 0]

    order = sort_order(parent)
    sp = parent[order]
    new = np.ones(n, dtype=bool)
    new[1:] = np.any(sp[1:] != sp[:-1], axis=1)
    out_coords = as_coords(sp[new])
    parent_row = np.empty(n, dtype=np.int64)
    parent_row[order] = np.cumsum(new) - 1

    k3 = stride ** 3
    by_off = np.lexsort((np.arange(n), off))
    ptr = np.zeros(k3 + 1, dtype=np.int64)
    np.cumsum(np.bincount(off, minlength=k3), out=ptr[1:])
    return Rulebook(stride, stride, kernel_offsets(stride, centered=False), ptr,
                    by_off.astype(np.int64), parent_row[by_off], coords, out_coords)
