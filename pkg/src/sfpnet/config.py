"""Flat ``key = value`` run configuration.

Resolution order is defaults, then the file, then command-line overrides.
Every key must already exist in :data:`DEFAULTS` and values are coerced to
the default's type, so typos and malformed values fail loudly.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "precision": "float32",
    "output_dir": "runs",
    "network.voxel_size": 0.1,
    "network.stage_channels": (32, 64, 128, 256, 256),
    "network.blocks_per_stage": (2, 2, 2, 2, 2),
    "network.sfp_blocks_per_stage": 1,
    "network.num_classes": 5,
    "network.use_sfpm_in": ("down0", "down1", "down2", "down3", "central"),
    "network.focal_gamma": 2.0,
    "sfpm.focal_levels": 3,
    "sfpm.base_kernel": 3,
    "sfpm.use_global_pool": True,
    "sfpm.gate_depth": 1,
    "train.lr": 8e-4,
    "train.weight_decay": 0.01,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.poly_power": 0.9,
    "train.batch_size": 8,
    "train.steps": 2000,
    "train.log_every": 10,
    "train.target_miou": 0.0,
    "data.pattern": "hybrid_solid",
    "data.train_scans": 64,
    "data.val_scans": 16,
    "data.max_range": 20.0,
    "data.noise_sigma": 0.01,
    "data.dir": "",
}

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce(key: str, raw, default):
    text = raw.strip() if isinstance(raw, str) else raw
    try:
        if isinstance(default, bool):
            if isinstance(text, bool):
                return text
            low = str(text).lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            if isinstance(text, float) and not text.is_integer():
                raise ValueError(text)
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = text if isinstance(text, (tuple, list)) else [
                t.strip() for t in str(text).split(",") if t.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(t) for t in items)
        return str(text)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read {raw!r} as {type(default).__name__}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


class RunConfig:
    """Resolved configuration; read with ``cfg["train.lr"]``."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for key, raw in (values or {}).items():
            self.set(key, raw)

    def set(self, key: str, raw) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, raw, DEFAULTS[key])
        if key == "precision" and self.values[key] not in _PRECISIONS:
            raise ConfigError(f"precision: expected one of {sorted(_PRECISIONS)}")

    def __getitem__(self, key: str):
        return self.values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.values == other.values

    @property
    def dtype(self):
        return _PRECISIONS[self.values["precision"]]

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(self.values.items()))

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    def network_config(self):
        from .network import NetworkConfig
        v = self.values
        try:
            return NetworkConfig(
                voxel_size=v["network.voxel_size"],
                stage_channels=v["network.stage_channels"],
                blocks_per_stage=v["network.blocks_per_stage"],
                sfp_blocks_per_stage=v["network.sfp_blocks_per_stage"],
                focal_levels=v["sfpm.focal_levels"],
                base_kernel=v["sfpm.base_kernel"],
                use_global_pool=v["sfpm.use_global_pool"],
                gate_depth=v["sfpm.gate_depth"],
                num_classes=v["network.num_classes"],
                use_sfpm_in=frozenset(v["network.use_sfpm_in"]),
                focal_gamma=v["network.focal_gamma"],
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"network: {exc}") from None


def parse_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        out[key.strip()] = val.strip()
    return out


def parse_overrides(overrides) -> dict:
    out = {}
    for item in overrides or ():
        key, sep, val = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r}: expected key=value")
        out[key.strip()] = val.strip()
    return out


def parse_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {str(path)!r} not found")
        for key, val in parse_text(path.read_text(), str(path)).items():
            cfg.set(key, val)
    for key, val in parse_overrides(overrides).items():
        cfg.set(key, val)
    return cfg


def loads(text: str) -> RunConfig:
    return RunConfig(parse_text(text))
