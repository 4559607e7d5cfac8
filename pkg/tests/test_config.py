import numpy as np
import pytest

from sfpnet.config import DEFAULTS, RunConfig, loads, parse_config, parse_text
from sfpnet.errors import ConfigError
from sfpnet.network import NetworkConfig


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    assert parse_config(path) == RunConfig()
    assert parse_config(path)["train.lr"] == 8e-4


def test_override_lr():
    assert parse_config(overrides=["train.lr=0.0008"])["train.lr"] == 8e-4


def test_unknown_key_is_named(tmp_path):
    with pytest.raises(ConfigError, match="network.widht"):
        parse_config(overrides=["network.widht=3"])
    path = tmp_path / "typo.cfg"
    path.write_text("network.widht = 3\n")
    with pytest.raises(ConfigError, match="network.widht"):
        parse_config(path)


@pytest.mark.parametrize("item", ["train.steps=ten", "train.steps=1.5", "sfpm.use_global_pool=maybe",
                                  "precision=float16", "network.stage_channels=8,x"])
def test_type_mismatch_names_key(item):
    with pytest.raises(ConfigError, match=item.split("=")[0]):
        parse_config(overrides=[item])


def test_later_source_wins(tmp_path):
    path = tmp_path / "a.cfg"
    path.write_text("# comment\ntrain.steps = 5  # trailing\n\nseed = 3\n")
    cfg = parse_config(path, ["train.steps=7"])
    assert cfg["train.steps"] == 7 and cfg["seed"] == 3


def test_missing_file_and_bad_lines(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "nope.cfg")
    with pytest.raises(ConfigError):
        parse_text("just words")
    with pytest.raises(ConfigError):
        parse_config(overrides=["novalue"])


def test_dumps_roundtrip_and_hash():
    cfg = parse_config(overrides=["network.stage_channels=16,32,32,32,32", "sfpm.use_global_pool=no",
                                  "train.lr=0.001"])
    again = loads(cfg.dumps())
    assert again == cfg
    assert again.hash() == cfg.hash() != RunConfig().hash()
    assert len(cfg.dumps().splitlines()) == len(DEFAULTS)


def test_network_config_defaults():
    cfg = RunConfig()
    assert cfg.network_config() == NetworkConfig()
    assert cfg.dtype is np.float32
    assert RunConfig({"precision": "float64"}).dtype is np.float64


def test_single_block_count_broadcasts():
    cfg = parse_config(overrides=["network.blocks_per_stage=1"])
    assert cfg.network_config().blocks_per_stage == (1,) * 5


def test_invalid_network_rejected():
    with pytest.raises(ConfigError):
        parse_config(overrides=["network.use_sfpm_in=up1"]).network_config()
