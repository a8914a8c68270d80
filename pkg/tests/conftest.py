import numpy as np
import pytest

from occkit.grid import FREE_CLASS, GridSpec, OccupancyGrid
from occkit.raycast import RayBundle, RayPattern


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_spec():
    return GridSpec(origin=(0.0, 0.0, 0.0), voxel_size=1.0, dims=(8, 8, 8))


@pytest.fixture
def small_spec():
    return GridSpec(origin=(0.0, 0.0, 0.0), voxel_size=0.4, dims=(16, 16, 4))


def make_grid(spec, occupied=(), label=0):
    labels = np.full(spec.dims, FREE_CLASS, dtype=np.uint8)
    for idx in occupied:
        labels[tuple(idx)] = label
    return OccupancyGrid(spec, labels)


def center(spec, idx):
    return np.asarray(spec.origin) + (np.asarray(idx, dtype=np.float64) + 0.5) * spec.voxel_size


def fan_bundle(origin, elevations=(-0.3, 0.0, 0.25), azimuths=32, max_range=8.0):
    pattern = RayPattern(tuple(elevations), azimuths, max_range)
    return RayBundle(np.asarray(origin, dtype=np.float64)[None], pattern.directions(), max_range, pattern)


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run timing checks on the default grid")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)
