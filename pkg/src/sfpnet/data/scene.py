"""Synthetic LiDAR scans: primitive scenes, scan patterns and ray casting.

Three sensor families are simulated: mechanical spinning (fixed rings with a
uniform azimuth sweep), solid state (a forward-facing raster) and hybrid
solid (a non-repetitive rosette built from two incommensurate angular
frequencies, whose phase depends on the seed).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from ..errors import ConfigError, InputError
from .scanio import ScanRecord

GROUND, WALL, POLE, BOX, FENCE = range(5)
CLASS_NAMES = ("ground", "wall", "pole", "box", "fence")
# base reflectivity per class; intensity = base + noise
CLASS_INTENSITY = (0.15, 0.55, 0.85, 0.35, 0.7)

_GOLDEN = (1.0 + 5.0 ** 0.5) / 2.0


class EmptyScanError(InputError):
    """No ray of the sensor pattern hit any primitive."""


# ---------------------------------------------------------------------------
# primitives; each exposes ray intersection and a signed distance


@dataclass(frozen=True)
class Ground:
    class_id: int = GROUND
    z: float = 0.0

    def intersect(self, origin, dirs):
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.z - origin[2]) / dz
        return np.where((dz < 0) & (t > 0), t, np.inf)

    def sdf(self, p):
        return p[:, 2] - self.z


@dataclass(frozen=True)
class Box:
    """Box of half-extents ``half`` rotated by ``yaw`` about the vertical axis."""

    center: tuple
    half: tuple
    class_id: int = BOX
    yaw: float = 0.0

    def _to_local(self, v, is_point=True):
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        v = np.asarray(v, dtype=np.float64)
        if is_point:
            v = v - np.asarray(self.center)
        x, y = v[..., 0], v[..., 1]
        out = np.empty_like(v)
        out[..., 0] = c * x + s * y
        out[..., 1] = -s * x + c * y
        out[..., 2] = v[..., 2]
        return out

    def intersect(self, origin, dirs):
        o = self._to_local(origin)
        d = self._to_local(dirs, is_point=False)
        h = np.asarray(self.half)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-h - o) * inv
            t2 = (h - o) * inv
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        hit = (tmax >= tmin) & (tmax > 0)
        t = np.where(tmin > 0, tmin, tmax)
        return np.where(hit, t, np.inf)

    def sdf(self, p):
        q = np.abs(self._to_local(p)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class Pole:
    """Vertical cylinder standing on ``z0``."""

    xy: tuple
    radius: float
    height: float
    class_id: int = POLE
    z0: float = 0.0

    def intersect(self, origin, dirs):
        ox, oy = origin[0] - self.xy[0], origin[1] - self.xy[1]
        dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        a = dx * dx + dy * dy
        b = 2.0 * (ox * dx + oy * dy)
        c = ox * ox + oy * oy - self.radius ** 2
        disc = b * b - 4.0 * a * c
        t_best = np.full(dirs.shape[0], np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
            for t in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
                z = origin[2] + t * dz
                ok = (t > 0) & (z >= self.z0) & (z <= self.z0 + self.height)
                t_best = np.where(ok & (t < t_best), t, t_best)
            for zc in (self.z0, self.z0 + self.height):
                t = (zc - origin[2]) / dz
                x = ox + t * dx
                y = oy + t * dy
                ok = (t > 0) & (x * x + y * y <= self.radius ** 2)
                t_best = np.where(ok & (t < t_best), t, t_best)
        return t_best

    def sdf(self, p):
        r = np.hypot(p[:, 0] - self.xy[0], p[:, 1] - self.xy[1]) - self.radius
        half = self.height / 2.0
        h = np.abs(p[:, 2] - (self.z0 + half)) - half
        outside = np.hypot(np.maximum(r, 0.0), np.maximum(h, 0.0))
        return outside + np.minimum(np.maximum(r, h), 0.0)


Primitive = Union[Ground, Box, Pole]


# ---------------------------------------------------------------------------
# scan patterns


@dataclass(frozen=True)
class Spinning:
    rings: int = 32
    azimuth_steps: int = 1024
    v_fov: tuple = (-30.0, 10.0)
    tag = "spinning"

    def directions(self, rng):
        el = np.radians(np.linspace(self.v_fov[0], self.v_fov[1], self.rings))
        az = 2 * np.pi * np.arange(self.azimuth_steps) / self.azimuth_steps
        el, az = np.meshgrid(el, az, indexing="ij")
        return _unit(az.ravel(), el.ravel())


@dataclass(frozen=True)
class SolidState:
    h_fov: float = 120.0
    v_fov: float = 25.0
    raster: tuple = (128, 32)
    tag = "solid_state"

    def directions(self, rng):
        nh, nv = self.raster
        az = np.radians(np.linspace(-self.h_fov / 2, self.h_fov / 2, nh))
        el = np.radians(np.linspace(-self.v_fov / 2, self.v_fov / 2, nv))
        el, az = np.meshgrid(el, az, indexing="ij")
        return _unit(az.ravel(), el.ravel())


@dataclass(frozen=True)
class HybridSolid:
    """Rosette: azimuth sweep modulated in elevation at an incommensurate rate."""

    petals: int = 7
    samples: int = 4000
    v_fov: tuple = (-7.0, 52.0)
    tag = "hybrid_solid"

    def directions(self, rng):
        t0 = rng.uniform(0.0, 1.0e4)
        t = t0 + np.arange(self.samples) / self.samples
        az = 2 * np.pi * 3.0 * t
        ratio = self.petals * _GOLDEN
        mid = 0.5 * (self.v_fov[0] + self.v_fov[1])
        amp = 0.5 * (self.v_fov[1] - self.v_fov[0])
        el = np.radians(mid + amp * np.sin(2 * np.pi * 3.0 * ratio * t))
        return _unit(az, el)


Pattern = Union[Spinning, SolidState, HybridSolid]
PATTERNS = {"spinning": Spinning, "solid_state": SolidState, "hybrid_solid": HybridSolid}


def _unit(az, el):
    ce = np.cos(el)
    return np.stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)], axis=1)


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    pattern: Pattern = field(default_factory=HybridSolid)
    max_range: float = 20.0
    noise_sigma: float = 0.01
    sensor_height: float = 1.0
    intensity_noise: float = 0.05

    def __post_init__(self):
        if not self.primitives:
            raise ConfigError("a scene needs at least one primitive")
        if not self.max_range > 0:
            raise ConfigError("max_range must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")

    @property
    def origin(self):
        return np.array([0.0, 0.0, self.sensor_height])


def random_scene(seed: int, pattern: Pattern | None = None, max_range: float = 20.0,
                 noise_sigma: float = 0.01, extent: float = 12.0) -> SceneSpec:
    """Ground plus randomly placed walls, poles, boxes and a fence."""
    rng = np.random.default_rng([seed, 7919])
    prims: list = [Ground()]

    def place(min_r, max_r):
        r = rng.uniform(min_r, max_r)
        a = rng.uniform(0, 2 * np.pi)
        return r * np.cos(a), r * np.sin(a), a

    for _ in range(2):
        x, y, a = place(0.6 * extent, extent)
        prims.append(Box((x, y, 1.5), (0.15, rng.uniform(3.0, 6.0), 1.5), WALL, yaw=a))
    for _ in range(int(rng.integers(3, 6))):
        x, y, _a = place(2.0, extent)
        prims.append(Pole((x, y), rng.uniform(0.12, 0.25), rng.uniform(3.0, 5.0)))
    for _ in range(int(rng.integers(3, 6))):
        x, y, a = place(2.5, 0.8 * extent)
        hx, hy, hz = rng.uniform(0.4, 1.2, size=3)
        prims.append(Box((x, y, hz), (hx, hy, hz), BOX, yaw=a))
    x, y, a = place(0.4 * extent, 0.8 * extent)
    prims.append(Box((x, y, 0.6), (0.04, rng.uniform(2.0, 4.0), 0.6), FENCE, yaw=a + np.pi / 2))
    return SceneSpec(tuple(prims), pattern or HybridSolid(), max_range, noise_sigma)


def cast_rays(spec: SceneSpec, dirs: np.ndarray):
    """First-hit range and primitive index per ray (``inf``/-1 for misses)."""
    origin = spec.origin
    t_all = np.stack([p.intersect(origin, dirs) for p in spec.primitives], axis=1)
    idx = np.argmin(t_all, axis=1)
    t = t_all[np.arange(dirs.shape[0]), idx]
    return t, np.where(np.isfinite(t), idx, -1)


def generate_scan(spec: SceneSpec, seed: int) -> ScanRecord:
    """Ray-cast the sensor pattern against the scene; deterministic per seed."""
    rng = np.random.default_rng([seed, 104729])
    dirs = spec.pattern.directions(rng)
    t, prim = cast_rays(spec, dirs)
    keep = (prim >= 0) & (t <= spec.max_range)
    if not keep.any():
        raise EmptyScanError("no ray hit any primitive within max_range")
    t, prim, dirs = t[keep], prim[keep], dirs[keep]
    if spec.noise_sigma > 0:
        t = t + rng.normal(0.0, spec.noise_sigma, size=t.shape)
    t = np.clip(t, 0.0, spec.max_range)
    xyz = spec.origin + t[:, None] * dirs
    classes = np.array([p.class_id for p in spec.primitives], dtype=np.int64)[prim]
    base = np.asarray(CLASS_INTENSITY)[classes]
    intensity = np.clip(base + rng.normal(0.0, spec.intensity_noise, size=t.shape), 0.0, 1.0)
    points = np.concatenate([xyz, intensity[:, None]], axis=1).astype(np.float32)
    return ScanRecord(points, classes, {"pattern": spec.pattern.tag, "seed": int(seed)})


def membership(spec: SceneSpec, points: np.ndarray, tol: float = 1e-3) -> np.ndarray:
    """Boolean ``(N, P)``: point lies on the surface of primitive ``p``."""
    p = np.asarray(points, dtype=np.float64)[:, :3]
    return np.stack([np.abs(prim.sdf(p)) <= tol for prim in spec.primitives], axis=1)


def direction_cells(points: np.ndarray, origin, bins_deg: float = 1.0) -> set:
    """Quantized (azimuth, elevation) cells of the points seen from ``origin``."""
    v = np.asarray(points, dtype=np.float64)[:, :3] - np.asarray(origin)
    az = np.degrees(np.arctan2(v[:, 1], v[:, 0]))
    el = np.degrees(np.arctan2(v[:, 2], np.hypot(v[:, 0], v[:, 1])))
    cells = np.stack([np.floor(az / bins_deg), np.floor(el / bins_deg)], axis=1).astype(np.int64)
    return set(map(tuple, cells.tolist()))


def jaccard(a: set, b: set) -> float:
    union = len(a | b)
    return len(a & b) / union if union else 1.0


def make_pattern(name: str, **kwargs) -> Pattern:
    try:
        cls = PATTERNS[name]
    except KeyError:
        raise ConfigError(f"unknown scan pattern {name!r}") from None
    return cls(**kwargs)
