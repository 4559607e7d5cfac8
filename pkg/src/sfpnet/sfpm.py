"""Sparse focal point modulation and the sparse focal point block.

A modulation layer maps voxel features ``x`` (N x C) to

    y = q(x) * h( sum_l g^l(x) * s^l )

where ``s^1..s^L`` are hierarchical contexts from submanifold convolutions
of growing kernel size, ``s^{L+1}`` is an optional per-scan global average,
``g`` are raw (unnormalised) per-voxel gates, ``h`` is a 1x1x1 channel mixer
and ``q`` a linear query.  All operations are centred on the voxel, so the
layer is translation equivariant and needs no positional encoding.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import ops
from .errors import ConfigError, ContractError
from .sparse import Rulebook, SparseTensor, build_rulebook

MLP_RATIO = 4


@dataclass(frozen=True)
class ModulatorConfig:
    channels: int
    focal_levels: int = 3
    base_kernel: int = 3
    use_global_pool: bool = True
    gate_depth: int = 1

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError("modulator channels must be positive")
        if self.focal_levels < 1:
            raise ConfigError("focal_levels must be >= 1")
        if self.base_kernel < 3 or self.base_kernel % 2 == 0:
            raise ConfigError("base_kernel must be odd and >= 3")
        if self.gate_depth < 1:
            raise ConfigError("gate_depth must be >= 1")

    @property
    def kernel_sizes(self) -> tuple:
        """Level kernel sizes; each level grows the previous one by 2."""
        return tuple(self.base_kernel + 2 * l for l in range(self.focal_levels))

    @property
    def gate_width(self) -> int:
        return self.focal_levels + (1 if self.use_global_pool else 0)

    def with_channels(self, channels: int) -> "ModulatorConfig":
        return ModulatorConfig(channels, self.focal_levels, self.base_kernel,
                               self.use_global_pool, self.gate_depth)


def receptive_fields(kernel_sizes, rule: str = "cumulative") -> tuple:
    """Effective receptive field after each focal level.

    ``cumulative``: ``1 + sum_{i<=l} (k_i - 1)``, the extent of a stack of
    stride-1 convolutions.  ``literal``: ``1 + l * (k_l - 1)``, the formula
    read with the level index in place of the summation index.
    """
    out, acc = [], 1
    for l, k in enumerate(kernel_sizes, start=1):
        acc += k - 1
        if rule == "cumulative":
            out.append(acc)
        elif rule == "literal":
            out.append(1 + l * (k - 1))
        else:
            raise ValueError(f"unknown receptive field rule {rule!r}")
    return tuple(out)


# ---------------------------------------------------------------------------
# parameters


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def modulator_param_shapes(cfg: ModulatorConfig) -> dict:
    c = cfg.channels
    shapes = {"stem.w": (c, c), "stem.b": (c,)}
    for l, k in enumerate(cfg.kernel_sizes):
        shapes[f"level{l}.w"] = (k ** 3, c, c)
        shapes[f"level{l}.b"] = (c,)
        shapes[f"level{l}.ln.g"] = (c,)
        shapes[f"level{l}.ln.b"] = (c,)
    for i in range(cfg.gate_depth):
        out = cfg.gate_width if i == cfg.gate_depth - 1 else c
        shapes[f"gate{i}.w"] = (c, out)
        shapes[f"gate{i}.b"] = (out,)
    shapes["mixer.w"] = (1, c, c)
    shapes["mixer.b"] = (c,)
    shapes["query.w"] = (c, c)
    shapes["query.b"] = (c,)
    return shapes


def init_modulator(store, prefix: str, cfg: ModulatorConfig, rng) -> None:
    """Register one modulation layer's parameters under ``prefix``."""
    c = cfg.channels
    for name, shape in modulator_param_shapes(cfg).items():
        full = f"{prefix}.{name}"
        if name.endswith(".ln.g"):
            val = np.ones(shape)
        elif name.endswith(".b"):
            val = np.zeros(shape)
        elif name.startswith("level"):
            val = _uniform(rng, shape, shape[0] * c)
        elif name == "mixer.w":
            val = _uniform(rng, shape, c)
        else:  # stem, gate and query projections
            val = rng.normal(0.0, 0.02, size=shape)
        store.add(full, val)


@dataclass
class ModulatorParams:
    """The tensors of one modulation layer (arrays or tape Vars)."""

    config: ModulatorConfig
    stem_w: Any
    stem_b: Any
    level_kernels: list
    level_norms: list
    gate_layers: list
    mixer_h: ops.ConvKernel
    query_w: Any
    query_b: Any

    def __post_init__(self):
        cfg = self.config
        if [k.kernel_size for k in self.level_kernels] != list(cfg.kernel_sizes):
            raise ContractError("level kernel sizes do not follow the growth rule")
        if ops.value(self.gate_layers[-1][0]).shape[1] != cfg.gate_width:
            raise ContractError("gate projection width must be L + 1 (L without pooling)")
        if self.mixer_h.kernel_size != 1:
            raise ContractError("channel mixer must be a 1x1x1 kernel")

    @classmethod
    def from_source(cls, src, prefix: str, cfg: ModulatorConfig) -> "ModulatorParams":
        """Collect tensors from any ``name -> tensor`` mapping (store, binding, dict)."""
        p = lambda n: src[f"{prefix}.{n}"]  # noqa: E731
        kernels = [ops.ConvKernel(p(f"level{l}.w"), p(f"level{l}.b"), k)
                   for l, k in enumerate(cfg.kernel_sizes)]
        norms = [(p(f"level{l}.ln.g"), p(f"level{l}.ln.b")) for l in range(cfg.focal_levels)]
        gates = [(p(f"gate{i}.w"), p(f"gate{i}.b")) for i in range(cfg.gate_depth)]
        return cls(cfg, p("stem.w"), p("stem.b"), kernels, norms, gates,
                   ops.ConvKernel(p("mixer.w"), p("mixer.b"), 1), p("query.w"), p("query.b"))


def make_rulebooks(x: SparseTensor, cfg: ModulatorConfig) -> dict:
    """Submanifold rulebooks for every level kernel size, keyed by size."""
    return {k: build_rulebook(x, k) for k in cfg.kernel_sizes}


# ---------------------------------------------------------------------------
# forward


def extract_contexts(x: SparseTensor, params: ModulatorParams, rb_set: dict,
                     num_batches: int | None = None) -> list:
    """Contexts ``S^1..S^L`` (and the pooled ``S^{L+1}``) as row-aligned features."""
    cfg = params.config
    s = ops.linear(x.features, params.stem_w, params.stem_b)
    levels = []
    for kernel, (g, b) in zip(params.level_kernels, params.level_norms):
        rb = rb_set.get(kernel.kernel_size) if rb_set is not None else None
        if not isinstance(rb, Rulebook) or rb.kernel_size != kernel.kernel_size or not rb.submanifold:
            raise ContractError(f"missing submanifold rulebook for kernel size {kernel.kernel_size}")
        if not rb.matches(x.coords):
            raise ContractError("level rulebook was built for different coordinates")
        s = ops.layer_norm(ops.gelu(ops.sparse_conv(s, kernel.weights, kernel.bias, rb)), g, b)
        levels.append(s)
    if cfg.use_global_pool:
        levels.append(ops.segment_mean(s, x.batch, num_batches))
    return levels


def gate_values(x_features, params: ModulatorParams):
    h = x_features
    last = len(params.gate_layers) - 1
    for i, (w, b) in enumerate(params.gate_layers):
        h = ops.linear(h, w, b)
        if i < last:
            h = ops.gelu(h)
    return h


def gated_aggregate(x: SparseTensor, levels: list, params: ModulatorParams) -> SparseTensor:
    """``h(sum_l G^l * S^l)`` with raw linear gates ``G`` computed from ``x``."""
    if len(levels) != params.config.gate_width:
        raise ContractError(f"{len(levels)} levels but gate width {params.config.gate_width}")
    gates = gate_values(x.features, params)
    mixed = ops.gated_sum(gates, levels)
    w = params.mixer_h.weights
    w0 = w[0] if not isinstance(w, ops.Var) else _center_slice(w)
    return x.replace(ops.linear(mixed, w0, params.mixer_h.bias))


def _center_slice(w):
    wv = ops.value(w)
    return w.tape.record("slice0", (w,), wv[0], lambda g: (g[None],))


def sfpm_forward(x: SparseTensor, params: ModulatorParams, rb_set: dict,
                 num_batches: int | None = None) -> SparseTensor:
    """Modulate every voxel by its aggregated focal context."""
    if x.num_channels != params.config.channels:
        raise ContractError(f"input has {x.num_channels} channels, modulator {params.config.channels}")
    levels = extract_contexts(x, params, rb_set, num_batches)
    modulator = gated_aggregate(x, levels, params)
    query = ops.linear(x.features, params.query_w, params.query_b)
    return x.replace(ops.mul(query, modulator.features))


# ---------------------------------------------------------------------------
# block


def block_param_shapes(cfg: ModulatorConfig) -> dict:
    c = cfg.channels
    shapes = {"ln1.g": (c,), "ln1.b": (c,)}
    shapes.update({f"sfpm.{k}": v for k, v in modulator_param_shapes(cfg).items()})
    shapes.update({"ln2.g": (c,), "ln2.b": (c,),
                   "mlp.fc1.w": (c, MLP_RATIO * c), "mlp.fc1.b": (MLP_RATIO * c,),
                   "mlp.fc2.w": (MLP_RATIO * c, c), "mlp.fc2.b": (c,)})
    return shapes


def init_block(store, prefix: str, cfg: ModulatorConfig, rng) -> None:
    c = cfg.channels
    store.add(f"{prefix}.ln1.g", np.ones(c))
    store.add(f"{prefix}.ln1.b", np.zeros(c))
    init_modulator(store, f"{prefix}.sfpm", cfg, rng)
    store.add(f"{prefix}.ln2.g", np.ones(c))
    store.add(f"{prefix}.ln2.b", np.zeros(c))
    store.add(f"{prefix}.mlp.fc1.w", _uniform(rng, (c, MLP_RATIO * c), c))
    store.add(f"{prefix}.mlp.fc1.b", np.zeros(MLP_RATIO * c))
    store.add(f"{prefix}.mlp.fc2.w", _uniform(rng, (MLP_RATIO * c, c), MLP_RATIO * c))
    store.add(f"{prefix}.mlp.fc2.b", np.zeros(c))


def sfp_block_forward(x: SparseTensor, src, prefix: str, cfg: ModulatorConfig,
                      rb_set: dict, num_batches: int | None = None) -> SparseTensor:
    """Pre-norm residual block: modulation then a 4x MLP, each with a skip."""
    p = lambda n: src[f"{prefix}.{n}"]  # noqa: E731
    params = ModulatorParams.from_source(src, f"{prefix}.sfpm", cfg)
    h = x.replace(ops.layer_norm(x.features, p("ln1.g"), p("ln1.b")))
    x1 = ops.add(x.features, sfpm_forward(h, params, rb_set, num_batches).features)
    h = ops.layer_norm(x1, p("ln2.g"), p("ln2.b"))
    h = ops.linear(ops.gelu(ops.linear(h, p("mlp.fc1.w"), p("mlp.fc1.b"))),
                   p("mlp.fc2.w"), p("mlp.fc2.b"))
    return x.replace(ops.add(x1, h))


# ---------------------------------------------------------------------------
# kernel export


def level_kernel_grids(store, prefix: str, cfg: ModulatorConfig) -> list:
    """Channel-averaged level kernels as ``k x k x k`` grids indexed [dz][dy][dx]."""
    grids = []
    for l, k in enumerate(cfg.kernel_sizes):
        w = np.asarray(store[f"{prefix}.level{l}.w"], dtype=np.float64)
        grids.append(w.mean(axis=(1, 2)).reshape(k, k, k))
    return grids


def export_level_kernels(entries, path=None) -> str:
    """Serialise ``(stage, block, level, grid)`` entries as a JSON array."""
    doc = [{"stage": stage, "block": block, "level": level + 1,
            "kernel_size": int(grid.shape[0]), "grid": grid.tolist()}
           for stage, block, level, grid in entries]
    text = json.dumps(doc)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
