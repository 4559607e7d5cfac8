"""Pure numpy implementations of the hot kernels.

Used when the compiled ``_core`` extension is unavailable, or when forced with
``SFP_BACKEND=python``.  Every function here has the same signature and
produces the same rulebooks as its compiled twin.
"""
import numpy as np

from ._grid import kernel_offsets, pack_keys

name = "python"


def submanifold_pairs(coords, kernel_size):
    n = coords.shape[0]
    offsets = kernel_offsets(kernel_size)
    k3 = offsets.shape[0]
    r = kernel_size // 2
    keys, layout = pack_keys(coords, pad=r)
    ins, outs = [], []
    if keys is None:
        return _pairs_by_dict(coords, offsets)
    lo, ext, radix = layout
    rows = np.arange(n, dtype=np.int64)
    for d in range(k3):
        step = int(offsets[d] @ radix[1:])
        probe = keys + step
        pos = np.searchsorted(keys, probe)
        pos[pos == n] = n - 1
        hit = keys[pos] == probe
        ins.append(pos[hit])
        outs.append(rows[hit])
    return _pack(ins, outs)


def _pairs_by_dict(coords, offsets):
    index = {tuple(c): i for i, c in enumerate(coords.tolist())}
    ins, outs = [], []
    for dx, dy, dz in offsets.tolist():
        di, do = [], []
        for j, (b, x, y, z) in enumerate(coords.tolist()):
            i = index.get((b, x + dx, y + dy, z + dz))
            if i is not None:
                di.append(i)
                do.append(j)
        ins.append(np.array(di, dtype=np.int64))
        outs.append(np.array(do, dtype=np.int64))
    return _pack(ins, outs)


def _pack(ins, outs):
    ptr = np.zeros(len(ins) + 1, dtype=np.int64)
    np.cumsum([a.shape[0] for a in ins], out=ptr[1:])
    if ins:
        return ptr, np.concatenate(ins).astype(np.int64), np.concatenate(outs).astype(np.int64)
    empty = np.zeros(0, dtype=np.int64)
    return ptr, empty, empty


# Within one offset every output row (and every input row) appears at most
# once, so fancy-indexed ``+=`` never drops a contribution.


def conv_forward(x, w, rb):
    out = np.zeros((rb.n_out, w.shape[2]), dtype=x.dtype)
    for d in range(rb.num_offsets):
        i, o = rb.pairs(d)
        if i.size:
            out[o] += x[i] @ w[d]
    return out


def conv_backward_input(g, w, rb):
    gx = np.zeros((rb.n_in, w.shape[1]), dtype=g.dtype)
    for d in range(rb.num_offsets):
        i, o = rb.pairs(d)
        if i.size:
            gx[i] += g[o] @ w[d].T
    return gx


def conv_backward_weight(x, g, rb):
    gw = np.zeros((rb.num_offsets, x.shape[1], g.shape[1]), dtype=x.dtype)
    for d in range(rb.num_offsets):
        i, o = rb.pairs(d)
        if i.size:
            gw[d] = x[i].T @ g[o]
    return gw
