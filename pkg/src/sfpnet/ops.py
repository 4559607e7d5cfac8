"""Differentiable dense and sparse operators.

Every function accepts tape ``Var`` handles or plain arrays.  When at least
one argument is a ``Var`` the result is recorded on that tape together with
its vector-Jacobian product; otherwise a plain ndarray is returned.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.special import ndtr

from . import _backend
from .autograd import Var
from .errors import ContractError
from .sparse import Rulebook, SparseTensor, build_rulebook, strided_rulebook

LN_EPS = 1e-5
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def value(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def _emit(op, inputs, out, vjp):
    for x in inputs:
        if isinstance(x, Var):
            return x.tape.record(op, inputs, out, vjp)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    av, bv = value(a), value(b)
    return _emit("add", (a, b), av + bv,
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value(a), value(b)
    return _emit("sub", (a, b), av - bv,
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    if np.ndim(bv) == 0 and not isinstance(b, Var):
        bv = np.asarray(bv, dtype=av.dtype)
    return _emit("mul", (a, b), av * bv,
                 lambda g: (_unbroadcast(g * bv, np.shape(av)),
                            _unbroadcast(g * av, np.shape(bv))))


def sum_all(x):
    xv = value(x)
    return _emit("sum", (x,), np.asarray(xv.sum()),
                 lambda g: (np.broadcast_to(g, xv.shape).astype(xv.dtype),))


def mean_all(x):
    xv = value(x)
    n = xv.size
    return _emit("mean", (x,), np.asarray(xv.sum() / n),
                 lambda g: (np.full(xv.shape, g / n, dtype=xv.dtype),))


def gelu_value(x):
    """Exact GeLU ``x * Phi(x)``; ``ndtr`` keeps the negative tail accurate."""
    x = np.asarray(x)
    return x * ndtr(x)


def gelu(x):
    xv = value(x)
    cdf = ndtr(xv)
    out = (xv * cdf).astype(xv.dtype, copy=False)

    def vjp(g):
        pdf = np.exp(-0.5 * xv * xv) * _INV_SQRT2PI
        return ((g * (cdf + xv * pdf)).astype(xv.dtype, copy=False),)
    return _emit("gelu", (x,), out, vjp)


def layer_norm(x, gain, shift, eps: float = LN_EPS):
    """Per-row ``(x - mean) / sqrt(var + eps) * gain + shift`` (population variance)."""
    xv = value(x)
    if xv.ndim != 2 or xv.shape[1] < 1:
        raise ContractError("layer_norm expects an (N, C) matrix with C >= 1")
    gv, sv = value(gain), value(shift)
    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gv + sv

    def vjp(g):
        gxh = g * gv
        gx = inv * (gxh - gxh.mean(axis=1, keepdims=True)
                    - xhat * (gxh * xhat).mean(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)
    return _emit("layer_norm", (x, gain, shift), out, vjp)


def linear(x, w, b=None):
    """Row-wise affine map ``x @ w + b``."""
    xv, wv = value(x), value(w)
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ContractError(f"linear: cannot map {xv.shape} with weight {wv.shape}")
    out = xv @ wv
    if b is not None:
        bv = value(b)
        if bv.shape != (wv.shape[1],):
            raise ContractError(f"linear: bias shape {bv.shape} != ({wv.shape[1]},)")
        out = out + bv

    def vjp(g):
        return g @ wv.T, xv.T @ g, (g.sum(axis=0) if b is not None else None)
    return _emit("linear", (x, w, b), out, vjp)


def concat(xs, axis: int = 1):
    vals = [value(x) for x in xs]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _emit("concat", tuple(xs), np.concatenate(vals, axis=axis),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def gather_rows(x, index):
    """``x[index]``; the adjoint scatter-adds rows in index order."""
    xv = value(x)
    index = np.asarray(index, dtype=np.int64)

    def vjp(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, index, g)
        return (gx,)
    return _emit("gather_rows", (x,), xv[index], vjp)


def gated_sum(gates, levels):
    """``sum_l gates[:, l:l+1] * levels[l]``: per-row scalar mixing of contexts."""
    gv = value(gates)
    lv = [value(s) for s in levels]
    if gv.ndim != 2 or gv.shape[1] != len(lv):
        raise ContractError(f"gate width {gv.shape[-1]} != number of levels {len(lv)}")
    out = np.zeros_like(lv[0])
    for l, s in enumerate(lv):
        if s.shape != lv[0].shape or s.shape[0] != gv.shape[0]:
            raise ContractError("levels must be row-aligned with the gates")
        out += gv[:, l:l + 1] * s

    def vjp(g):
        gg = np.stack([(g * s).sum(axis=1) for s in lv], axis=1).astype(gv.dtype, copy=False)
        return (gg,) + tuple(gv[:, l:l + 1] * g for l in range(len(lv)))
    return _emit("gated_sum", (gates,) + tuple(levels), out, vjp)


def segment_mean(x, batch, num_batches: int | None = None):
    """Mean of the rows of each batch, broadcast back to those rows."""
    xv = value(x)
    batch = np.asarray(batch)
    if xv.shape[0] == 0:
        raise ContractError("global average pooling of an empty tensor")
    labels, inverse, counts = np.unique(batch, return_inverse=True, return_counts=True)
    if num_batches is not None:
        missing = np.setdiff1d(np.arange(num_batches), labels)
        if missing.size:
            raise ContractError(f"batch {int(missing[0])} has no voxels")
    sorted_rows = bool(np.all(np.diff(batch) >= 0))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    def seg_sum(a):
        if sorted_rows:
            return np.add.reduceat(a, starts, axis=0)
        s = np.zeros((labels.size,) + a.shape[1:], dtype=a.dtype)
        np.add.at(s, inverse, a)
        return s

    scale = (1.0 / counts).astype(xv.dtype)[:, None]
    out = (seg_sum(xv) * scale)[inverse]
    return _emit("segment_mean", (x,), out,
                 lambda g: ((seg_sum(g) * scale)[inverse],))


def global_avg_pool(x: SparseTensor, num_batches: int | None = None) -> SparseTensor:
    """Per-batch channel means replicated to every voxel of that batch."""
    return x.replace(segment_mean(x.features, x.batch, num_batches))


# ---------------------------------------------------------------------------
# loss


def log_softmax_value(z):
    z = np.asarray(z)
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def focal_loss(logits, labels, gamma: float = 2.0, class_weights=None, ignore_index=None):
    """Mean over non-ignored rows of ``-alpha_y (1 - p_y)**gamma log p_y``."""
    zv = value(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = zv.shape
    if labels.shape != (n,):
        raise ContractError(f"labels shape {labels.shape} != ({n},)")
    valid = np.ones(n, dtype=bool) if ignore_index is None else labels != ignore_index
    if not valid.any():
        raise ContractError("focal_loss: every row is ignored")
    lv = labels[valid]
    if lv.min() < 0 or lv.max() >= k:
        raise ContractError("focal_loss: label outside [0, K)")
    alpha = np.ones(k) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if alpha.shape != (k,):
        raise ContractError("class_weights must have one entry per class")

    z = zv[valid].astype(np.float64)
    logp = log_softmax_value(z)
    rows = np.arange(lv.size)
    logpy = logp[rows, lv]
    py = np.exp(logpy)
    a = alpha[lv]
    one_m = -np.expm1(logpy)  # 1 - p_y without cancellation
    mod = one_m ** gamma if gamma != 0 else np.ones_like(one_m)
    per_row = -a * mod * logpy
    count = lv.size
    loss = np.asarray(per_row.sum() / count, dtype=zv.dtype)

    def vjp(g):
        # d/dz_k = -a [(1-p)^g - g (1-p)^(g-1) p log p] (onehot_k - p_k)
        if gamma == 0:
            coef = -a
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                dmod = np.where(one_m > 0, gamma * one_m ** (gamma - 1.0), 0.0)
            coef = -a * (mod - dmod * py * logpy)
        p = np.exp(logp)
        d = -p
        d[rows, lv] += 1.0
        gz = np.zeros(zv.shape, dtype=np.float64)
        gz[valid] = (coef / count)[:, None] * d * float(g)
        return (gz.astype(zv.dtype, copy=False),)
    return _emit("focal_loss", (logits,), loss, vjp)


def cross_entropy_value(logits, labels):
    logp = log_softmax_value(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels)
    return float(-logp[np.arange(labels.size), labels].mean())


# ---------------------------------------------------------------------------
# sparse convolution


@dataclass
class ConvKernel:
    """Weights ``(k**3, C_in, C_out)`` in (dz, dy, dx) offset order, optional bias."""

    weights: Any
    bias: Any = None
    kernel_size: int = 3

    def __post_init__(self):
        shape = value(self.weights).shape
        if len(shape) != 3 or shape[0] != self.kernel_size ** 3:
            raise ContractError(
                f"kernel of size {self.kernel_size} needs {self.kernel_size ** 3} offsets, "
                f"got weight shape {shape}")

    @property
    def in_channels(self) -> int:
        return value(self.weights).shape[1]

    @property
    def out_channels(self) -> int:
        return value(self.weights).shape[2]


def _check_conv(xv, wv, rb: Rulebook):
    if xv.ndim != 2 or xv.shape[0] != rb.n_in:
        raise ContractError(f"rulebook expects {rb.n_in} input rows, got {xv.shape[0]}")
    if wv.shape[0] != rb.num_offsets:
        raise ContractError(f"rulebook has {rb.num_offsets} offsets, kernel {wv.shape[0]}")
    if xv.shape[1] != wv.shape[1]:
        raise ContractError(f"input has {xv.shape[1]} channels, kernel expects {wv.shape[1]}")


def _common(*arrays):
    dtype = np.result_type(*arrays)
    return [np.ascontiguousarray(a, dtype=dtype) for a in arrays]


def sparse_conv(x, w, b, rb: Rulebook):
    """Gather-GEMM-scatter along ``rb``: ``out[j] = sum x[i] @ w[d] (+ b)``."""
    xv, wv = value(x), value(w)
    _check_conv(xv, wv, rb)
    xc, wc = _common(xv, wv)
    out = _backend.kernels.conv_forward(xc, wc, rb)
    if b is not None:
        out += value(b)

    def vjp(g):
        gc = np.ascontiguousarray(g, dtype=xc.dtype)
        gx = _backend.kernels.conv_backward_input(gc, wc, rb) if isinstance(x, Var) else None
        gw = _backend.kernels.conv_backward_weight(xc, gc, rb) if isinstance(w, Var) else None
        gb = gc.sum(axis=0) if isinstance(b, Var) else None
        return gx, gw, gb
    return _emit("sparse_conv", (x, w, b), out, vjp)


def submconv_forward(x: SparseTensor, kernel: ConvKernel, rb: Rulebook | None = None) -> SparseTensor:
    """Submanifold convolution; output coordinates equal input coordinates."""
    if rb is None:
        rb = build_rulebook(x, kernel.kernel_size)
    if not rb.submanifold or rb.kernel_size != kernel.kernel_size:
        raise ContractError("submconv needs a submanifold rulebook of the kernel's size")
    if not rb.matches(x.coords):
        raise ContractError("rulebook was built for different coordinates")
    return x.replace(sparse_conv(x.features, kernel.weights, kernel.bias, rb))


def submconv_backward(grad_out, x: SparseTensor, kernel: ConvKernel, rb: Rulebook):
    """Adjoint of :func:`submconv_forward`: ``(grad_x, grad_weights, grad_bias)``."""
    xv, wv = value(x.features), value(kernel.weights)
    _check_conv(xv, wv, rb)
    xc, wc, gc = _common(xv, wv, np.asarray(grad_out))
    gx = _backend.kernels.conv_backward_input(gc, wc, rb)
    gw = _backend.kernels.conv_backward_weight(xc, gc, rb)
    gb = gc.sum(axis=0) if kernel.bias is not None else None
    return gx, gw, gb


def strided_downsample(x: SparseTensor, kernel: ConvKernel, rb: Rulebook | None = None):
    """Stride-2 sparse convolution over each parent's 2x2x2 children.

    Returns ``(tensor, rulebook)``; the rulebook is what the matching
    :func:`upsample_inverse` consumes.
    """
    if kernel.kernel_size != 2:
        raise ContractError("downsample kernel must cover the 2x2x2 children")
    if rb is None:
        rb = strided_rulebook(x.coords, 2)
    elif rb.stride != 2 or rb.transposed or not rb.matches(x.coords):
        raise ContractError("downsample rulebook does not match the input")
    out = sparse_conv(x.features, kernel.weights, kernel.bias, rb)
    return SparseTensor(rb.out_coords, out, x.stride * 2), rb


def upsample_inverse(x: SparseTensor, cached: Rulebook | None, kernel: ConvKernel) -> SparseTensor:
    """Scatter parent rows back to the cached children, mixing per child offset."""
    if cached is None:
        raise ContractError("upsample needs the rulebook of the matching downsample")
    if cached.stride < 2 or cached.transposed:
        raise ContractError("upsample needs a strided (downsample) rulebook")
    if not np.array_equal(x.coords, cached.out_coords):
        raise ContractError("upsample input does not match the cached downsample output")
    if kernel.kernel_size != cached.kernel_size:
        raise ContractError("upsample kernel size does not match the rulebook")
    rb = cached.transpose()
    out = sparse_conv(x.features, kernel.weights, kernel.bias, rb)
    return SparseTensor(rb.out_coords, out, max(x.stride // cached.stride, 1))
