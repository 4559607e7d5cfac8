"""Coordinate packing and kernel offset enumeration."""
import numpy as np


def pack_keys(coords: np.ndarray, pad: int = 0):
    """Order-preserving int64 keys for ``coords`` plus the packing layout.

    Returns ``(keys, layout)`` or ``(None, None)`` when the padded extent does
    not fit in 62 bits.  ``pad`` widens the box so that neighbours within
    ``pad`` voxels also pack without wraparound.
    """
    c = coords.astype(np.int64)
    lo = c.min(axis=0) - pad
    lo[0] = 0
    ext = c.max(axis=0) + pad - lo + 1
    ext[0] = c[:, 0].max() + 1
    if float(np.prod(ext.astype(np.float64))) >= 2.0 ** 62:
        return None, None
    # radix order batch, z, y, x
    radix = np.array([ext[3] * ext[2] * ext[1], 1, ext[1], ext[1] * ext[2]], dtype=np.int64)
    keys = (c - lo) @ radix
    return keys, (lo, ext, radix)


def kernel_offsets(kernel_size: int, centered: bool = True) -> np.ndarray:
    """``(k**3, 3)`` array of ``(dx, dy, dz)`` offsets in (dz, dy, dx) order."""
    lo = -(kernel_size // 2) if centered else 0
    r = np.arange(lo, lo + kernel_size)
    dz, dy, dx = np.meshgrid(r, r, r, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel(), dz.ravel()], axis=1).astype(np.int64)
