"""Registered finite-difference gradient cases.

Each case builder takes a generator and returns ``(f, theta)`` for
:func:`finite_diff_check`: ``theta`` packs every differentiable input of the
operator into one float64 vector and ``f`` reduces the operator output to a
scalar with a fixed random projection.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import ParamStore, finite_diff_check
from .errors import ConfigError
from .sfpm import (ModulatorConfig, ModulatorParams, init_block, init_modulator,
                   make_rulebooks, sfp_block_forward, sfpm_forward)
from .sparse import SparseTensor, build_rulebook, strided_rulebook

OP_TOL = 1e-4
NETWORK_TOL = 1e-3


def unpack(var, shapes):
    """Split a flat tape variable into differentiable pieces of ``shapes``."""
    flat = var.value
    out, start = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        stop = start + size

        def vjp(g, start=start, stop=stop):
            full = np.zeros_like(flat)
            full[start:stop] = g.reshape(-1)
            return (full,)
        out.append(var.tape.record("unpack", (var,), flat[start:stop].reshape(shape), vjp))
        start = stop
    return out


def _pack(*arrays):
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def _project(out, rng_proj):
    return ops.sum_all(ops.mul(out, rng_proj))


def _coords(rng, n, extent=4, batches=1):
    c = np.column_stack([rng.integers(0, batches, 4 * n), rng.integers(0, extent, (4 * n, 3))])
    c = np.unique(c, axis=0)
    c = c[rng.permutation(len(c))[:n]]
    return SparseTensor.from_unsorted(c.astype(np.int32), np.zeros((len(c), 0))).coords


def _elementwise(op, broadcast=False):
    def build(rng):
        n, c = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        a = rng.standard_normal((n, c))
        b = rng.standard_normal((1, c) if broadcast else (n, c))
        proj = rng.standard_normal((n, c))

        def f(tape, theta):
            x, y = unpack(theta, [a.shape, b.shape])
            return _project(op(x, y), proj)
        return f, _pack(a, b)
    return build


def _unary(op, scale=1.0):
    def build(rng):
        x = rng.standard_normal((int(rng.integers(2, 6)), int(rng.integers(1, 5)))) * scale
        proj = rng.standard_normal(x.shape)

        def f(tape, theta):
            (v,) = unpack(theta, [x.shape])
            return _project(op(v), proj)
        return f, _pack(x)
    return build


def _reduce(op):
    def build(rng):
        x = rng.standard_normal((int(rng.integers(2, 6)), 3))

        def f(tape, theta):
            (v,) = unpack(theta, [x.shape])
            return ops.mul(op(v), 1.7)
        return f, _pack(x)
    return build


def _layer_norm(rng):
    n, c = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    x, g, b = rng.standard_normal((n, c)), rng.standard_normal(c), rng.standard_normal(c)
    proj = rng.standard_normal((n, c))

    def f(tape, theta):
        xv, gv, bv = unpack(theta, [x.shape, g.shape, b.shape])
        return _project(ops.layer_norm(xv, gv, bv), proj)
    return f, _pack(x, g, b)


def _linear(rng):
    n, ci, co = (int(v) for v in rng.integers(1, 6, 3))
    x, w, b = rng.standard_normal((n, ci)), rng.standard_normal((ci, co)), rng.standard_normal(co)
    proj = rng.standard_normal((n, co))

    def f(tape, theta):
        xv, wv, bv = unpack(theta, [x.shape, w.shape, b.shape])
        return _project(ops.linear(xv, wv, bv), proj)
    return f, _pack(x, w, b)


def _concat(rng):
    n = int(rng.integers(1, 5))
    a, b = rng.standard_normal((n, 2)), rng.standard_normal((n, 3))
    proj = rng.standard_normal((n, 5))

    def f(tape, theta):
        av, bv = unpack(theta, [a.shape, b.shape])
        return _project(ops.concat([av, bv]), proj)
    return f, _pack(a, b)


def _gather_rows(rng):
    x = rng.standard_normal((int(rng.integers(2, 6)), 3))
    idx = rng.integers(0, x.shape[0], 9)  # repeats exercise the scatter-add
    proj = rng.standard_normal((9, 3))

    def f(tape, theta):
        (v,) = unpack(theta, [x.shape])
        return _project(ops.gather_rows(v, idx), proj)
    return f, _pack(x)


def _gated_sum(rng):
    n, c, levels = int(rng.integers(2, 6)), 3, int(rng.integers(1, 5))
    gates = rng.standard_normal((n, levels))
    ctx = rng.standard_normal((levels, n, c))
    proj = rng.standard_normal((n, c))

    def f(tape, theta):
        g, *s = unpack(theta, [gates.shape] + [(n, c)] * levels)
        return _project(ops.gated_sum(g, s), proj)
    return f, _pack(gates, ctx)


def _segment_mean(rng):
    batch = np.sort(rng.integers(0, 3, 8))
    batch = np.searchsorted(np.unique(batch), batch)
    x = rng.standard_normal((8, 3))
    proj = rng.standard_normal((8, 3))

    def f(tape, theta):
        (v,) = unpack(theta, [x.shape])
        return _project(ops.segment_mean(v, batch), proj)
    return f, _pack(x)


def _focal(gamma, weighted):
    def build(rng):
        n, k = int(rng.integers(3, 8)), int(rng.integers(2, 6))
        z = rng.standard_normal((n, k))
        labels = rng.integers(0, k, n)
        labels[0] = 255
        w = rng.uniform(0.5, 2.0, k) if weighted else None

        def f(tape, theta):
            (v,) = unpack(theta, [z.shape])
            return ops.focal_loss(v, labels, gamma, w, ignore_index=255)
        return f, _pack(z)
    return build


def _submconv(k):
    def build(rng):
        coords = _coords(rng, int(rng.integers(3, 15)), batches=2)
        ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = rng.standard_normal((len(coords), ci))
        w = rng.standard_normal((k ** 3, ci, co)) * 0.5
        b = rng.standard_normal(co)
        rb = build_rulebook(coords, k)
        proj = rng.standard_normal((len(coords), co))

        def f(tape, theta):
            xv, wv, bv = unpack(theta, [x.shape, w.shape, b.shape])
            return _project(ops.sparse_conv(xv, wv, bv, rb), proj)
        return f, _pack(x, w, b)
    return build


def _strided(transposed):
    def build(rng):
        coords = _coords(rng, int(rng.integers(3, 15)), extent=6, batches=2)
        rb = strided_rulebook(coords, 2)
        if transposed:
            rb = rb.transpose()
        ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = rng.standard_normal((rb.n_in, ci))
        w = rng.standard_normal((8, ci, co))
        b = rng.standard_normal(co)
        proj = rng.standard_normal((rb.n_out, co))

        def f(tape, theta):
            xv, wv, bv = unpack(theta, [x.shape, w.shape, b.shape])
            return _project(ops.sparse_conv(xv, wv, bv, rb), proj)
        return f, _pack(x, w, b)
    return build


def _store_case(init, forward, cfg, n=12):
    """Gradient with respect to the input features and every parameter."""
    def build(rng):
        coords = _coords(rng, n, batches=2)
        store = ParamStore(np.float64)
        init(store, "m", cfg, rng)
        for name in store.names():  # non-trivial norms and biases
            store.set(name, store[name] + 0.1 * rng.standard_normal(store[name].shape))
        x = rng.standard_normal((len(coords), cfg.channels))
        rbs = make_rulebooks(SparseTensor(coords, x), cfg)
        names = store.names()
        shapes = [x.shape] + [store[k].shape for k in names]
        proj = rng.standard_normal(x.shape)

        def f(tape, theta):
            xv, *pv = unpack(theta, shapes)
            src = dict(zip(names, pv))
            out = forward(SparseTensor(coords, xv), src, rbs)
            return _project(out.features, proj)
        return f, _pack(x, *(store[k] for k in names))
    return build


_SFP_CFG = ModulatorConfig(channels=3, focal_levels=2, base_kernel=3)


def _sfpm_forward(x, src, rbs):
    return sfpm_forward(x, ModulatorParams.from_source(src, "m", _SFP_CFG), rbs)


def _sfp_block(x, src, rbs):
    return sfp_block_forward(x, src, "m", _SFP_CFG, rbs)


OP_CASES = {
    "add": _elementwise(ops.add),
    "add_broadcast": _elementwise(ops.add, broadcast=True),
    "sub": _elementwise(ops.sub),
    "mul": _elementwise(ops.mul),
    "mul_broadcast": _elementwise(ops.mul, broadcast=True),
    "sum_all": _reduce(ops.sum_all),
    "mean_all": _reduce(ops.mean_all),
    "gelu": _unary(ops.gelu),
    "layer_norm": _layer_norm,
    "linear": _linear,
    "concat": _concat,
    "gather_rows": _gather_rows,
    "gated_sum": _gated_sum,
    "segment_mean": _segment_mean,
    "focal_loss": _focal(2.0, weighted=True),
    "focal_loss_gamma0": _focal(0.0, weighted=False),
    "submconv_k3": _submconv(3),
    "submconv_k5": _submconv(5),
    "strided_downsample": _strided(False),
    "upsample_inverse": _strided(True),
    "sfpm_forward": _store_case(init_modulator, _sfpm_forward, _SFP_CFG),
    "sfp_block": _store_case(init_block, _sfp_block, _SFP_CFG),
}


@dataclass
class CaseResult:
    name: str
    seed: int
    max_rel_err: float
    tol: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def check_op(name: str, seed: int, samples: int | None = 20) -> CaseResult:
    try:
        build = OP_CASES[name]
    except KeyError:
        raise ConfigError(f"no gradient case named {name!r}") from None
    rng = np.random.default_rng(seed)
    f, theta = build(rng)
    rep = finite_diff_check(f, theta, samples=samples, rng=rng)
    return CaseResult(name, seed, rep.max_rel_err, OP_TOL, rep.checked)


# ---------------------------------------------------------------------------
# whole network


def tiny_scene(seed: int, voxels: int = 30, num_classes: int = 5):
    """A labelled scan whose points fall into ``voxels`` distinct voxels."""
    from .data.scanio import ScanRecord
    rng = np.random.default_rng(seed)
    cells = np.unique(rng.integers(0, 12, (voxels * 4, 3)), axis=0)
    cells = cells[rng.permutation(len(cells))[:voxels]]
    reps = rng.integers(1, 3, voxels)
    cells = np.repeat(cells, reps, axis=0)
    xyz = (cells + rng.uniform(0.05, 0.95, cells.shape)) * 0.1
    pts = np.column_stack([xyz, rng.uniform(0, 1, len(xyz))])
    return ScanRecord(pts, rng.integers(0, num_classes, len(xyz)))


def network_case(seed: int, samples: int = 20) -> CaseResult:
    """Loss gradient of a tiny SFPNet with respect to all of its parameters."""
    from .network import NetworkConfig, build_network, forward_points, prepare
    cfg = NetworkConfig(stage_channels=(8, 8, 8, 8, 8), blocks_per_stage=1,
                        focal_levels=2, num_classes=5)
    net, store = build_network(cfg, seed=seed, dtype=np.float64)
    scan = tiny_scene(seed)
    plan = prepare(net, [scan])
    names = store.names()
    shapes = [store[k].shape for k in names]

    class _Src(dict):
        dtype = np.float64

    def f(tape, theta):
        src = _Src(zip(names, unpack(theta, shapes)))
        logits = forward_points(net, src, plan)
        return ops.focal_loss(logits, plan.labels, cfg.focal_gamma)

    rng = np.random.default_rng(seed)
    rep = finite_diff_check(f, _pack(*(store[k] for k in names)), samples=samples, rng=rng)
    return CaseResult("network", seed, rep.max_rel_err, NETWORK_TOL, rep.checked)


def run_gradcheck(seed: int = 0, names=None, samples: int | None = 20,
                  network: bool = True) -> list:
    names = list(OP_CASES) if names is None else list(names)
    out = [check_op(n, seed, samples) for n in names]
    if network:
        out.append(network_case(seed))
    return out
