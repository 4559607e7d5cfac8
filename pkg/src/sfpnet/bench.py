"""Throughput of the hot paths on generated scans, per kernel backend."""
from __future__ import annotations

import time

import numpy as np

from . import _backend, ops
from .autograd import ParamStore
from .data import Spinning, generate_scan, random_scene
from .sfpm import ModulatorConfig, ModulatorParams, init_modulator, make_rulebooks, sfpm_forward
from .sparse import build_rulebook, voxelize

# azimuth steps of a 32-ring spinning sensor
SCALES = {"small": 256, "medium": 1024, "large": 2048}
CHANNELS = 16


def _timed(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_scale(scale: str, backend: str, repeat: int = 3, voxel_size: float = 0.1,
                seed: int = 0) -> list:
    """``[{stage, voxels, seconds, voxels_per_sec}]`` for one scale and backend."""
    spec = random_scene(seed, Spinning(azimuth_steps=SCALES[scale]))
    points = generate_scan(spec, seed).points
    previous = _backend.use_backend(backend)
    try:
        rng = np.random.default_rng(seed)
        t_vox, (x, _) = _timed(lambda: voxelize(points, voxel_size), repeat)
        n = len(x)
        t_rb, rb = _timed(lambda: build_rulebook(x, 3), repeat)
        feats = rng.standard_normal((n, CHANNELS)).astype(np.float32)
        w = (rng.standard_normal((27, CHANNELS, CHANNELS)) * 0.1).astype(np.float32)
        t_conv, _ = _timed(lambda: ops.sparse_conv(feats, w, None, rb), repeat)
        cfg = ModulatorConfig(CHANNELS)
        store = ParamStore(np.float32)
        init_modulator(store, "m", cfg, rng)
        params = ModulatorParams.from_source(store, "m", cfg)
        xt = x.replace(feats)
        t_sfpm, _ = _timed(lambda: sfpm_forward(xt, params, make_rulebooks(xt, cfg)), repeat)
    finally:
        _backend.use_backend(previous)
    return [{"stage": stage, "voxels": n, "seconds": t, "voxels_per_sec": n / t}
            for stage, t in (("voxelize", t_vox), ("rulebook", t_rb),
                             ("submconv", t_conv), ("sfpm", t_sfpm))]


def run_bench(scales=tuple(SCALES), backends=None, repeat: int = 3) -> list:
    backends = _backend.available() if backends is None else list(backends)
    rows = []
    for scale in scales:
        for backend in backends:
            for row in bench_scale(scale, backend, repeat):
                rows.append({"scale": scale, "backend": backend, **row})
    return rows
