# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: rulebook construction and gather-GEMM-scatter.

Parallel loops partition the *written* rows (or offsets), and every output
element is accumulated in a fixed order, so results do not depend on the
thread count.
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.stdint cimport int32_t, int64_t, uint32_t, uint64_t
from libc.stdlib cimport free, malloc
from scipy.linalg.cython_blas cimport dgemm, sgemm

from ._grid import kernel_offsets, pack_keys

cnp.import_array()

name = "cython"

cdef int _num_threads = 0

ctypedef fused real:
    float
    double


def set_num_threads(int n):
    """Cap worker threads; 0 means the OpenMP default."""
    global _num_threads
    _num_threads = max(n, 0)


def get_num_threads():
    return _num_threads


cdef inline int _threads() noexcept nogil:
    cdef int n = _num_threads
    if n <= 0:
        return openmp_max_threads()
    return n


cdef extern from *:
    """
    #ifdef _OPENMP
    #include <omp.h>
    static int openmp_max_threads(void) { return omp_get_max_threads(); }
    #else
    static int openmp_max_threads(void) { return 1; }
    #endif
    """
    int openmp_max_threads() noexcept nogil


# ---------------------------------------------------------------------------
# coordinate hash table (open addressing, linear probing, exact key compare)

cdef inline uint64_t _mix(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * <uint64_t>0xbf58476d1ce4e5b9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94d049bb133111ebULL
    return z ^ (z >> 31)


cdef inline uint64_t _hash(int32_t b, int32_t x, int32_t y, int32_t z) noexcept nogil:
    cdef uint64_t hi = (<uint64_t><uint32_t>b << 32) | <uint64_t><uint32_t>z
    cdef uint64_t lo = (<uint64_t><uint32_t>y << 32) | <uint64_t><uint32_t>x
    return _mix(lo ^ _mix(hi))


cdef inline int64_t _lookup(const int32_t[:, ::1] c, const int64_t[::1] table, uint64_t mask,
                            int32_t b, int32_t x, int32_t y, int32_t z) noexcept nogil:
    cdef uint64_t h = _hash(b, x, y, z) & mask
    cdef int64_t r
    while True:
        r = table[h]
        if r < 0:
            return -1
        if c[r, 0] == b and c[r, 1] == x and c[r, 2] == y and c[r, 3] == z:
            return r
        h = (h + 1) & mask


def submanifold_pairs(coords, int kernel_size):
    coords = np.ascontiguousarray(coords, dtype=np.int32)
    offsets = kernel_offsets(kernel_size)
    keys, layout = pack_keys(coords, pad=kernel_size // 2)
    if keys is None:
        return _hashed_pairs(coords, offsets)
    steps = np.ascontiguousarray(offsets @ layout[2][1:], dtype=np.int64)
    return _merged_pairs(np.ascontiguousarray(keys), steps)


def _merged_pairs(const int64_t[::1] keys, const int64_t[::1] steps):
    """Neighbour search as a merge join: shifted sorted keys stay sorted."""
    cdef Py_ssize_t n = keys.shape[0], k3 = steps.shape[0]
    counts_arr = np.zeros(k3, dtype=np.int64)
    cdef int64_t[::1] counts = counts_arr
    cdef Py_ssize_t d, j, i
    cdef int64_t probe, cnt, pos
    cdef int nt = _threads()
    for d in prange(k3, nogil=True, num_threads=nt, schedule="static"):
        i = 0
        cnt = 0
        for j in range(n):
            probe = keys[j] + steps[d]
            while i < n and keys[i] < probe:
                i = i + 1
            if i == n:
                break
            if keys[i] == probe:
                cnt = cnt + 1
        counts[d] = cnt
    ptr_arr = np.zeros(k3 + 1, dtype=np.int64)
    np.cumsum(counts_arr, out=ptr_arr[1:])
    cdef int64_t[::1] ptr = ptr_arr
    in_arr = np.empty(ptr_arr[k3], dtype=np.int64)
    out_arr = np.empty(ptr_arr[k3], dtype=np.int64)
    cdef int64_t[::1] ins = in_arr
    cdef int64_t[::1] outs = out_arr
    for d in prange(k3, nogil=True, num_threads=nt, schedule="static"):
        i = 0
        pos = ptr[d]
        for j in range(n):
            probe = keys[j] + steps[d]
            while i < n and keys[i] < probe:
                i = i + 1
            if i == n:
                break
            if keys[i] == probe:
                ins[pos] = i
                outs[pos] = j
                pos = pos + 1
    return ptr_arr, in_arr, out_arr


def _hashed_pairs(const int32_t[:, ::1] coords, const int64_t[:, ::1] offsets):
    """Open-addressing hash path for coordinate boxes too wide to pack."""
    cdef Py_ssize_t n = coords.shape[0], k3 = offsets.shape[0]
    cdef Py_ssize_t cap = 16
    while cap < 2 * n:
        cap *= 2
    cdef uint64_t mask = <uint64_t>(cap - 1)
    table_arr = np.full(cap, -1, dtype=np.int64)
    cdef int64_t[::1] table = table_arr
    cdef Py_ssize_t j, d
    cdef uint64_t h
    for j in range(n):
        h = _hash(coords[j, 0], coords[j, 1], coords[j, 2], coords[j, 3]) & mask
        while table[h] >= 0:
            h = (h + 1) & mask
        table[h] = j
    ins, outs = [], []
    hits_arr = np.empty(n, dtype=np.int64)
    rows_arr = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] hits = hits_arr
    cdef int64_t[::1] rows = rows_arr
    cdef int64_t r, cnt
    cdef int32_t dx, dy, dz
    for d in range(k3):
        dx = <int32_t>offsets[d, 0]
        dy = <int32_t>offsets[d, 1]
        dz = <int32_t>offsets[d, 2]
        cnt = 0
        with nogil:
            for j in range(n):
                r = _lookup(coords, table, mask, coords[j, 0], coords[j, 1] + dx,
                            coords[j, 2] + dy, coords[j, 3] + dz)
                if r >= 0:
                    hits[cnt] = r
                    rows[cnt] = j
                    cnt += 1
        ins.append(hits_arr[:cnt].copy())
        outs.append(rows_arr[:cnt].copy())
    ptr = np.zeros(k3 + 1, dtype=np.int64)
    np.cumsum([a.shape[0] for a in ins], out=ptr[1:])
    return ptr, np.concatenate(ins), np.concatenate(outs)


# ---------------------------------------------------------------------------
# sparse convolution: per offset, gather rows -> one GEMM -> scatter-add.
# Within one offset every destination row occurs at most once, so the
# parallel gather/scatter loops never race.

cdef inline void _gemm(char ta, char tb, int m, int n, int k, real *a, int lda,
                       real *b, int ldb, real *c, int ldc) noexcept nogil:
    # column-major C (m x n) = op(A) op(B)
    cdef real one = 1.0, zero = 0.0
    if real is float:
        sgemm(&ta, &tb, &m, &n, &k, &one, a, &lda, b, &ldb, &zero, c, &ldc)
    else:
        dgemm(&ta, &tb, &m, &n, &k, &one, a, &lda, b, &ldb, &zero, c, &ldc)


cdef int _gather_mm_scatter(const real[:, ::1] src, const real[:, :, ::1] w, bint trans_w,
                            const int64_t[::1] ptr, const int64_t[::1] gat,
                            const int64_t[::1] sca, real[:, ::1] dst) except -1:
    """dst[sca[p]] += src[gat[p]] @ op(w[d]) for every pair p of offset d."""
    cdef Py_ssize_t k3 = ptr.shape[0] - 1
    cdef int cs = <int>src.shape[1], cd = <int>dst.shape[1]
    cdef Py_ssize_t maxp = 0, d, p, c, npairs
    for d in range(k3):
        if ptr[d + 1] - ptr[d] > maxp:
            maxp = ptr[d + 1] - ptr[d]
    if maxp == 0:
        return 0
    cdef real *buf_in = <real *>malloc(maxp * cs * sizeof(real))
    cdef real *buf_out = <real *>malloc(maxp * cd * sizeof(real))
    if buf_in == NULL or buf_out == NULL:
        free(buf_in)
        free(buf_out)
        raise MemoryError()
    cdef int nt = _threads()
    cdef int np_
    cdef int64_t base, row
    with nogil:
        for d in range(k3):
            base = ptr[d]
            npairs = ptr[d + 1] - base
            if npairs == 0:
                continue
            np_ = <int>npairs
            for p in prange(npairs, num_threads=nt, schedule="static"):
                row = gat[base + p]
                for c in range(cs):
                    buf_in[p * cs + c] = src[row, c]
            if trans_w:
                # w[d] is (cd x cs) row-major; need src_rows @ w[d].T
                _gemm(c'T', c'N', cd, np_, cs, <real *>&w[d, 0, 0], cs,
                      buf_in, cs, buf_out, cd)
            else:
                # w[d] is (cs x cd) row-major
                _gemm(c'N', c'N', cd, np_, cs, <real *>&w[d, 0, 0], cd,
                      buf_in, cs, buf_out, cd)
            for p in prange(npairs, num_threads=nt, schedule="static"):
                row = sca[base + p]
                for c in range(cd):
                    dst[row, c] += buf_out[p * cd + c]
    free(buf_in)
    free(buf_out)
    return 0


def _forward(const real[:, ::1] x, const real[:, :, ::1] w, const int64_t[::1] ptr,
             const int64_t[::1] ins, const int64_t[::1] outs, Py_ssize_t n_out):
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n_out, w.shape[2]), dtype=dtype)
    _gather_mm_scatter[real](x, w, False, ptr, ins, outs, out)
    return out


def _backward_input(const real[:, ::1] g, const real[:, :, ::1] w, const int64_t[::1] ptr,
                    const int64_t[::1] ins, const int64_t[::1] outs, Py_ssize_t n_in):
    dtype = np.float32 if real is float else np.float64
    gx = np.zeros((n_in, w.shape[1]), dtype=dtype)
    _gather_mm_scatter[real](g, w, True, ptr, outs, ins, gx)
    return gx


def _backward_weight(const real[:, ::1] x, const real[:, ::1] g, const int64_t[::1] ptr,
                     const int64_t[::1] ins, const int64_t[::1] outs):
    cdef Py_ssize_t k3 = ptr.shape[0] - 1
    cdef int cin = <int>x.shape[1], cout = <int>g.shape[1]
    dtype = np.float32 if real is float else np.float64
    gw_arr = np.zeros((k3, cin, cout), dtype=dtype)
    cdef real[:, :, ::1] gw = gw_arr
    cdef Py_ssize_t maxp = 0, d, p, c, npairs
    for d in range(k3):
        if ptr[d + 1] - ptr[d] > maxp:
            maxp = ptr[d + 1] - ptr[d]
    if maxp == 0:
        return gw_arr
    cdef real *bx = <real *>malloc(maxp * cin * sizeof(real))
    cdef real *bg = <real *>malloc(maxp * cout * sizeof(real))
    if bx == NULL or bg == NULL:
        free(bx)
        free(bg)
        raise MemoryError()
    cdef int nt = _threads()
    cdef int64_t base, ri, ro
    with nogil:
        for d in range(k3):
            base = ptr[d]
            npairs = ptr[d + 1] - base
            if npairs == 0:
                continue
            for p in prange(npairs, num_threads=nt, schedule="static"):
                ri = ins[base + p]
                ro = outs[base + p]
                for c in range(cin):
                    bx[p * cin + c] = x[ri, c]
                for c in range(cout):
                    bg[p * cout + c] = g[ro, c]
            # gw[d] (cin x cout row-major) = bx.T @ bg
            _gemm(c'N', c'T', cout, cin, <int>npairs, bg, cout, bx, cin,
                  &gw[d, 0, 0], cout)
    free(bx)
    free(bg)
    return gw_arr


def conv_forward(x, w, rb):
    return _forward(x, w, rb.ptr, rb.in_idx, rb.out_idx, rb.n_out)


def conv_backward_input(g, w, rb):
    return _backward_input(g, w, rb.ptr, rb.in_idx, rb.out_idx, rb.n_in)


def conv_backward_weight(x, g, rb):
    return _backward_weight(x, g, rb.ptr, rb.in_idx, rb.out_idx)
