import numpy as np
import pytest

from sfpnet.checkpoint import dumps, load_checkpoint, loads, save_checkpoint
from sfpnet.errors import FormatError
from sfpnet.network import build_network, prepare, train_step

from conftest import TINY, dyadic_scan


@pytest.fixture(scope="module")
def trained():
    net, store = build_network(TINY, seed=4)
    plan = prepare(net, [dyadic_scan(np.random.default_rng(0), n=80)])
    for _ in range(3):
        train_step(net, store, plan, 8e-4)
    return store


def test_roundtrip_bit_exact(trained, tmp_path):
    path = save_checkpoint(tmp_path / "c.sfpk", trained, "seed = 4\n")
    text, back = load_checkpoint(path)
    assert text == "seed = 4\n"
    assert back.names() == trained.names()
    assert back.step == trained.step == 3
    assert back.dtype == trained.dtype
    for name in trained.names():
        a, b = trained.params[name], back.params[name]
        for x, y in ((a.value, b.value), (a.m, b.m), (a.v, b.v)):
            assert x.dtype == y.dtype and np.array_equal(x, y)
    assert dumps(back, text) == path.read_bytes()


def test_float64_roundtrip(trained):
    wide = trained.astype(np.float64)
    assert dumps(loads(dumps(wide))[1]) == dumps(wide)


def test_layout_header(trained):
    data = dumps(trained, "x = 1\n")
    assert data[:4] == b"SFPK"
    assert int.from_bytes(data[4:8], "little") == 1
    assert int.from_bytes(data[8:16], "little") == 6
    assert data[16:22] == b"x = 1\n"
    assert int.from_bytes(data[22:30], "little") == 3 * len(trained) + 1


@pytest.mark.parametrize("where", [0, 20, 100, -9, -1])
def test_flipped_byte_detected(trained, where):
    data = bytearray(dumps(trained))
    data[where] ^= 0x01
    with pytest.raises(FormatError):
        loads(bytes(data))


def test_truncation_detected(trained):
    data = dumps(trained)
    for cut in (3, 40, len(data) - 1):
        with pytest.raises(FormatError):
            loads(data[:cut])
