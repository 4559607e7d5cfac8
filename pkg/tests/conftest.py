import numpy as np
import pytest

from sfpnet import _backend
from sfpnet.data import ScanRecord
from sfpnet.network import NetworkConfig, build_network


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=_backend.available())
def backend(request):
    previous = _backend.use_backend(request.param)
    yield request.param
    _backend.use_backend(previous)


def random_coords(rng, n, extent=6, batches=1):
    c = np.column_stack([rng.integers(0, batches, 4 * n), rng.integers(-extent, extent, (4 * n, 3))])
    c = np.unique(c, axis=0)
    return c[rng.permutation(len(c))[:n]].astype(np.int32)


def dyadic_scan(rng, n=400, span=320, num_classes=5):
    """Points on a 1/64 grid so shifts by multiples of 0.125 are exact in float32."""
    xyz = rng.integers(0, span, (n, 3)) / 64.0
    pts = np.column_stack([xyz, rng.integers(0, 64, n) / 64.0])
    return ScanRecord(pts, rng.integers(0, num_classes, n))


TINY = NetworkConfig(voxel_size=0.125, stage_channels=(8, 8, 8, 8, 8), blocks_per_stage=1)


@pytest.fixture(scope="module")
def tiny_net():
    return build_network(TINY, seed=0)
