"""SFPNet: a sparse U-Net with focal point blocks in the encoder and centre.

Layout (widths ``c0..c4``)::

    stem (3x3x3 submconv, 4 -> c0)
    down0..down3: basic blocks [+ focal blocks], then 2x2x2 stride-2 conv
    central:      basic blocks [+ focal blocks]
    up3..up0:     inverse of the cached downsample, concat skip, linear fuse,
                  basic blocks
    head:         LN -> GeLU -> linear c0 -> K, gathered back to points

Forward functions take a parameter *source*: a ``ParamStore`` (plain numpy
evaluation) or a ``Binding`` (records on a tape for training).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .autograd import ParamStore, Tape, adamw_step
from .errors import ConfigError, ContractError, InputError, TrainingError
from .sfpm import ModulatorConfig, init_block, level_kernel_grids, sfp_block_forward
from .sparse import (SparseTensor, build_rulebook, concat_batches, strided_rulebook,
                     voxelize)

DOWN_STAGES = ("down0", "down1", "down2", "down3")
SFPM_STAGES = DOWN_STAGES + ("central",)
IN_CHANNELS = 4
IGNORE = 255


@dataclass(frozen=True)
class NetworkConfig:
    voxel_size: float = 0.1
    stage_channels: tuple = (32, 64, 128, 256, 256)
    blocks_per_stage: tuple = (2, 2, 2, 2, 2)
    sfp_blocks_per_stage: int = 1
    focal_levels: int = 3
    base_kernel: int = 3
    use_global_pool: bool = True
    gate_depth: int = 1
    num_classes: int = 5
    use_sfpm_in: frozenset = frozenset(SFPM_STAGES)
    focal_gamma: float = 2.0

    def __post_init__(self):
        sc = tuple(int(c) for c in self.stage_channels)
        if len(sc) != 5 or min(sc) < 1:
            raise ConfigError("stage_channels needs 5 positive widths (4 down + central)")
        object.__setattr__(self, "stage_channels", sc)
        bps = self.blocks_per_stage
        bps = (int(bps),) if np.isscalar(bps) else tuple(int(b) for b in bps)
        bps = bps * 5 if len(bps) == 1 else bps
        if len(bps) != 5 or min(bps) < 0:
            raise ConfigError("blocks_per_stage needs 5 non-negative counts")
        object.__setattr__(self, "blocks_per_stage", bps)
        use = frozenset(self.use_sfpm_in)
        unknown = use - set(SFPM_STAGES)
        if unknown:
            raise ConfigError(f"focal blocks only allowed in {SFPM_STAGES}, got {sorted(unknown)}")
        object.__setattr__(self, "use_sfpm_in", use)
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not self.voxel_size > 0:
            raise ConfigError("voxel_size must be positive")
        if self.sfp_blocks_per_stage < 0:
            raise ConfigError("sfp_blocks_per_stage must be non-negative")
        self.modulator(0)  # validates the modulator fields

    def modulator(self, level: int) -> ModulatorConfig:
        return ModulatorConfig(self.stage_channels[level], self.focal_levels, self.base_kernel,
                               self.use_global_pool, self.gate_depth)


# Ablation rows: fewer focal levels, no global pooling, basic blocks only.
ABLATIONS = {
    "optimal": {},
    "ablation1": {"focal_levels": 2},
    "ablation2": {"use_global_pool": False},
    "ablation3": {"use_sfpm_in": frozenset()},
}


def ablation_config(base: NetworkConfig, name: str) -> NetworkConfig:
    try:
        return replace(base, **ABLATIONS[name])
    except KeyError:
        raise ConfigError(f"unknown ablation {name!r}") from None


# ---------------------------------------------------------------------------
# construction


def _uniform(rng, shape, fan_in):
    b = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-b, b, size=shape)


def _init_basic_block(store, prefix, c, rng):
    for i in (1, 2):
        store.add(f"{prefix}.ln{i}.g", np.ones(c))
        store.add(f"{prefix}.ln{i}.b", np.zeros(c))
        store.add(f"{prefix}.conv{i}.w", _uniform(rng, (27, c, c), 27 * c))
        store.add(f"{prefix}.conv{i}.b", np.zeros(c))


@dataclass
class Network:
    config: NetworkConfig
    stages: list = field(default_factory=list)

    @property
    def level_kernel_sizes(self) -> list:
        """Submanifold kernel sizes needed at each resolution level."""
        cfg = self.config
        out = []
        for level, name in enumerate(SFPM_STAGES):
            sizes = {3}
            if name in cfg.use_sfpm_in and cfg.sfp_blocks_per_stage > 0:
                sizes.update(cfg.modulator(level).kernel_sizes)
            out.append(sorted(sizes))
        return out


def build_network(config: NetworkConfig, seed: int = 0, dtype=np.float32):
    """Network description plus a deterministically initialised ParamStore."""
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype=dtype)
    cfg = config
    c = cfg.stage_channels
    store.add("stem.w", _uniform(rng, (27, IN_CHANNELS, c[0]), 27 * IN_CHANNELS))
    store.add("stem.b", np.zeros(c[0]))
    for level, name in enumerate(SFPM_STAGES):
        for b in range(cfg.blocks_per_stage[level]):
            _init_basic_block(store, f"{name}.block{b}", c[level], rng)
        if name in cfg.use_sfpm_in:
            for b in range(cfg.sfp_blocks_per_stage):
                init_block(store, f"{name}.sfp{b}", cfg.modulator(level), rng)
        if level < 4:
            store.add(f"{name}.pool.w", _uniform(rng, (8, c[level], c[level + 1]), 8 * c[level]))
            store.add(f"{name}.pool.b", np.zeros(c[level + 1]))
    for level in reversed(range(4)):
        name = f"up{level}"
        store.add(f"{name}.unpool.w", _uniform(rng, (8, c[level + 1], c[level]), c[level + 1]))
        store.add(f"{name}.fuse.w", _uniform(rng, (2 * c[level], c[level]), 2 * c[level]))
        store.add(f"{name}.fuse.b", np.zeros(c[level]))
        for b in range(cfg.blocks_per_stage[level]):
            _init_basic_block(store, f"{name}.block{b}", c[level], rng)
    store.add("head.ln.g", np.ones(c[0]))
    store.add("head.ln.b", np.zeros(c[0]))
    store.add("head.w", _uniform(rng, (c[0], cfg.num_classes), c[0]))
    store.add("head.b", np.zeros(cfg.num_classes))
    return Network(cfg, list(SFPM_STAGES) + [f"up{l}" for l in reversed(range(4))]), store


# ---------------------------------------------------------------------------
# input preparation


@dataclass
class Plan:
    """Voxelized batch with every rulebook the forward pass needs."""

    features: np.ndarray
    coords: list
    rulebooks: list
    down: list
    point_to_voxel: np.ndarray
    labels: np.ndarray | None
    num_batches: int
    points_per_scan: list

    @property
    def num_points(self) -> int:
        return self.point_to_voxel.shape[0]


def prepare(net: Network, scans) -> Plan:
    """Voxelize ``scans`` into one batch and build all rulebooks.

    Voxel coordinates are taken relative to each scan's bounding-box corner.
    """
    scans = list(scans)
    if not scans:
        raise InputError("empty batch")
    tensors, maps = [], []
    for b, scan in enumerate(scans):
        if len(scan.points) == 0:
            raise InputError("empty scan")
        t, m = voxelize(scan.points, net.config.voxel_size, batch=b)
        # anchor the stride-2 grids at the scan's own corner so any integer shift is exact
        tensors.append(t.shifted(-t.coords[:, 1:].min(axis=0)))
        maps.append(m)
    x, vmap = concat_batches(tensors, maps)
    labels = None
    if all(getattr(s, "labels", None) is not None for s in scans):
        labels = np.concatenate([np.asarray(s.labels, dtype=np.int64) for s in scans])
    coords, rbs, downs = [x.coords], [], []
    for level, sizes in enumerate(net.level_kernel_sizes):
        rbs.append({k: build_rulebook(coords[level], k) for k in sizes})
        if level < 4:
            down = strided_rulebook(coords[level], 2)
            downs.append(down)
            coords.append(down.out_coords)
    return Plan(np.asarray(x.features), coords, rbs, downs, vmap.point_to_voxel, labels,
                len(scans), [len(s.points) for s in scans])


# ---------------------------------------------------------------------------
# forward


def basic_block(x, src, prefix, rb):
    """Pre-activation SSCN residual block: x + conv(act(conv(act(x))))."""
    p = lambda n: src[f"{prefix}.{n}"]  # noqa: E731
    h = ops.gelu(ops.layer_norm(x, p("ln1.g"), p("ln1.b")))
    h = ops.sparse_conv(h, p("conv1.w"), p("conv1.b"), rb)
    h = ops.gelu(ops.layer_norm(h, p("ln2.g"), p("ln2.b")))
    h = ops.sparse_conv(h, p("conv2.w"), p("conv2.b"), rb)
    return ops.add(x, h)


def forward_voxels(net: Network, src, plan: Plan):
    """Per-voxel logits at the input resolution."""
    cfg = net.config
    dtype = np.dtype(getattr(getattr(src, "store", src), "dtype", np.float32))
    feats = plan.features.astype(dtype)
    h = ops.sparse_conv(feats, src["stem.w"], src["stem.b"], plan.rulebooks[0][3])
    skips = []
    for level, name in enumerate(SFPM_STAGES):
        rbs = plan.rulebooks[level]
        for b in range(cfg.blocks_per_stage[level]):
            h = basic_block(h, src, f"{name}.block{b}", rbs[3])
        if name in cfg.use_sfpm_in:
            mcfg = cfg.modulator(level)
            for b in range(cfg.sfp_blocks_per_stage):
                x = SparseTensor(plan.coords[level], h)
                h = sfp_block_forward(x, src, f"{name}.sfp{b}", mcfg, rbs,
                                      plan.num_batches).features
        if level < 4:
            skips.append(h)
            h = ops.sparse_conv(h, src[f"{name}.pool.w"], src[f"{name}.pool.b"],
                                plan.down[level])
    for level in reversed(range(4)):
        name = f"up{level}"
        h = ops.sparse_conv(h, src[f"{name}.unpool.w"], None, plan.down[level].transpose())
        h = ops.linear(ops.concat([h, skips[level]]), src[f"{name}.fuse.w"], src[f"{name}.fuse.b"])
        for b in range(cfg.blocks_per_stage[level]):
            h = basic_block(h, src, f"{name}.block{b}", plan.rulebooks[level][3])
    h = ops.gelu(ops.layer_norm(h, src["head.ln.g"], src["head.ln.b"]))
    return ops.linear(h, src["head.w"], src["head.b"])


def forward_points(net: Network, src, plan: Plan):
    """Per-point logits ``(num_points, K)`` via the voxel map."""
    return ops.gather_rows(forward_voxels(net, src, plan), plan.point_to_voxel)


def network_forward(net: Network, store: ParamStore, scan) -> np.ndarray:
    """Logits for every point of one scan (or a list of scans)."""
    scans = [scan] if hasattr(scan, "points") else list(scan)
    return np.asarray(forward_points(net, store, prepare(net, scans)))


def predict_labels(logits) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=1)


def loss_on_tape(net: Network, store: ParamStore, plan: Plan, class_weights=None):
    tape = Tape()
    bound = store.bind(tape)
    logits = forward_points(net, bound, plan)
    loss = ops.focal_loss(logits, plan.labels, net.config.focal_gamma, class_weights,
                          ignore_index=IGNORE)
    return tape, bound, loss, logits


def train_step(net: Network, store: ParamStore, plan: Plan, lr: float,
               weight_decay: float = 0.01, betas=(0.9, 0.999), class_weights=None):
    """One AdamW step on the focal loss; returns the loss before the update."""
    if plan.labels is None:
        raise ContractError("train_step needs labelled scans")
    tape, bound, loss, logits = loss_on_tape(net, store, plan, class_weights)
    value = float(loss.value)
    if not np.isfinite(value):
        raise TrainingError("loss is not finite")
    grads = tape.backward(loss)
    bound.accumulate(grads)
    adamw_step(store, lr, weight_decay, betas)
    return value, np.asarray(logits.value)


def level_kernel_entries(net: Network, store: ParamStore) -> list:
    """``(stage, block, level, grid)`` for every focal level kernel."""
    out = []
    cfg = net.config
    for level, name in enumerate(SFPM_STAGES):
        if name not in cfg.use_sfpm_in:
            continue
        for b in range(cfg.sfp_blocks_per_stage):
            grids = level_kernel_grids(store, f"{name}.sfp{b}.sfpm", cfg.modulator(level))
            out.extend((name, b, l, g) for l, g in enumerate(grids))
    return out
