"""Dense reference implementations used to validate the sparse kernels.

These deliberately avoid rulebooks, packed keys and the compiled backend:
features are scattered into a dense zero-padded grid, convolved with plain
slicing, and read back at the occupied sites.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .sparse import SparseTensor


def dense_offsets(kernel_size: int, centered: bool = True) -> list:
    """``(dx, dy, dz)`` triples with dz slowest and dx fastest."""
    lo = -(kernel_size // 2) if centered else 0
    rng = range(lo, lo + kernel_size)
    return [(dx, dy, dz) for dz, dy, dx in itertools.product(rng, rng, rng)]


def dense_submconv(coords, features, weights, bias=None):
    """Masked dense convolution evaluated at the occupied sites only."""
    coords = np.asarray(coords, dtype=np.int64)
    features = np.asarray(features, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    k = round(weights.shape[0] ** (1 / 3))
    r = k // 2
    out = np.zeros((coords.shape[0], weights.shape[2]))
    for b in np.unique(coords[:, 0]):
        rows = np.flatnonzero(coords[:, 0] == b)
        xyz = coords[rows, 1:]
        lo = xyz.min(axis=0) - r
        shape = tuple(xyz.max(axis=0) - lo + 1 + r)
        grid = np.zeros(shape + (features.shape[1],))
        local = xyz - lo
        grid[local[:, 0], local[:, 1], local[:, 2]] = features[rows]
        for d, (dx, dy, dz) in enumerate(dense_offsets(k)):
            src = local + (dx, dy, dz)
            ok = np.all((src >= 0) & (src < shape), axis=1)
            vals = np.zeros((rows.size, features.shape[1]))
            vals[ok] = grid[src[ok, 0], src[ok, 1], src[ok, 2]]
            out[rows] += vals @ weights[d]
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)
    return out


def dense_downsample(coords, features, weights, bias=None, stride: int = 2):
    """Stride-``s`` convolution over each parent's children, by direct loops."""
    coords = np.asarray(coords, dtype=np.int64)
    parents = {}
    for row, (b, x, y, z) in enumerate(coords.tolist()):
        key = (b, x // stride, y // stride, z // stride)
        child = ((z % stride) * stride + (y % stride)) * stride + (x % stride)
        parents.setdefault(key, []).append((row, child))
    keys = sorted(parents, key=lambda c: (c[0], c[3], c[2], c[1]))
    out = np.zeros((len(keys), weights.shape[2]))
    for j, key in enumerate(keys):
        for row, child in parents[key]:
            out[j] += np.asarray(features[row], dtype=np.float64) @ weights[child]
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)
    return np.array(keys, dtype=np.int32), out


@dataclass
class OracleCase:
    seed: int
    kernel_size: int
    num_voxels: int
    max_abs_diff: float


def random_instance(rng, max_voxels: int = 60, extent: int = 8, max_channels: int = 5):
    """Random small sparse tensor, kernel size in {1, 3, 5}, 64-bit values."""
    n_batches = int(rng.integers(1, 3))
    n = int(rng.integers(1, max_voxels + 1))
    cand = np.column_stack([rng.integers(0, n_batches, n),
                            rng.integers(-extent, extent, (n, 3))])
    cand = np.unique(cand, axis=0)
    cin, cout = (int(c) for c in rng.integers(1, max_channels + 1, 2))
    k = int(rng.choice([1, 3, 5]))
    x = SparseTensor.from_unsorted(cand.astype(np.int32), rng.standard_normal((len(cand), cin)))
    w = rng.standard_normal((k ** 3, cin, cout))
    b = rng.standard_normal(cout)
    return x, w, b, k


def submconv_case(seed: int) -> OracleCase:
    from .ops import ConvKernel, submconv_forward
    rng = np.random.default_rng(seed)
    x, w, b, k = random_instance(rng)
    got = submconv_forward(x, ConvKernel(w, b, k)).features
    want = dense_submconv(x.coords, x.features, w, b)
    return OracleCase(seed, k, len(x), float(np.max(np.abs(got - want))))


def run_oracle(cases: int = 200, seed: int = 0) -> list:
    return [submconv_case(seed + i) for i in range(cases)]
