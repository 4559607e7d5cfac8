"""Training and evaluation loops shared by the CLI and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import poly_lr
from .config import RunConfig
from .data import ConfusionMatrix, generate_scan, load_scan, make_pattern, random_scene
from .network import build_network, forward_points, predict_labels, prepare, train_step

VAL_SEED_OFFSET = 1_000_000


def synthetic_scans(cfg: RunConfig, split: str = "train") -> list:
    """Deterministic synthetic scans; validation seeds never overlap training."""
    count = cfg["data.train_scans"] if split == "train" else cfg["data.val_scans"]
    base = cfg["seed"] * 10_000 + (0 if split == "train" else VAL_SEED_OFFSET)
    scans = []
    for i in range(count):
        spec = random_scene(base + i, make_pattern(cfg["data.pattern"]),
                            max_range=cfg["data.max_range"], noise_sigma=cfg["data.noise_sigma"])
        scans.append(generate_scan(spec, seed=base + i))
    return scans


def load_dir(path) -> list:
    files = sorted(Path(path).glob("*.sfpc"))
    return [load_scan(f) for f in files]


def dataset(cfg: RunConfig, split: str = "train") -> list:
    if cfg["data.dir"]:
        scans = load_dir(Path(cfg["data.dir"]) / split)
        if scans:
            return scans
    return synthetic_scans(cfg, split)


def batch_partition(n: int, batch_size: int, seed: int) -> list:
    """Fixed shuffled partition of ``range(n)`` into batches."""
    order = np.random.default_rng(seed).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class TrainResult:
    store: object
    net: object
    losses: list = field(default_factory=list)
    mious: list = field(default_factory=list)
    steps_to_target: int | None = None


def train(cfg: RunConfig, scans, report=None, steps: int | None = None) -> TrainResult:
    """Train from scratch; ``report(step, metrics)`` is called every ``train.log_every``.

    The per-step mIoU is measured on the batch logits before the update, so
    with a single batch it is the exact training-set mIoU of those weights.
    """
    net, store = build_network(cfg.network_config(), seed=cfg["seed"], dtype=cfg.dtype)
    total = cfg["train.steps"] if steps is None else steps
    batches = batch_partition(len(scans), cfg["train.batch_size"], cfg["seed"])
    plans = {}
    result = TrainResult(store, net)
    k = cfg["network.num_classes"]
    target = cfg["train.target_miou"]
    for step in range(total):
        b = step % len(batches)
        if b not in plans:
            plans[b] = prepare(net, [scans[i] for i in batches[b]])
        plan = plans[b]
        lr = poly_lr(cfg["train.lr"], step, total, cfg["train.poly_power"])
        loss, logits = train_step(net, store, plan, lr, cfg["train.weight_decay"],
                                  (cfg["train.beta1"], cfg["train.beta2"]))
        _, miou = ConfusionMatrix(k).accumulate(predict_labels(logits), plan.labels).iou()
        result.losses.append(loss)
        result.mious.append(miou)
        last = step == total - 1
        hit = target > 0 and miou >= target
        if report is not None and (step % cfg["train.log_every"] == 0 or last or hit):
            report(step, {"loss": loss, "lr": lr, "batch_miou": miou})
        if hit:
            result.steps_to_target = step
            break
    return result


def evaluate(net, store, scans, batch_size: int = 8) -> ConfusionMatrix:
    cm = ConfusionMatrix(net.config.num_classes)
    for i in range(0, len(scans), batch_size):
        chunk = scans[i:i + batch_size]
        plan = prepare(net, chunk)
        cm.accumulate(predict_labels(forward_points(net, store, plan)), plan.labels)
    return cm
