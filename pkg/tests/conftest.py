import numpy as np
import pytest

from geoinv.dataset import DatasetSpec, GeneratorConfig, build_dataset, make_operators, split_dataset
from geoinv.grid import SensorPlane, VoxelDomain

DESK_GEN = GeneratorConfig(toy_steps=3, prism_min=2, prism_max=5)


@pytest.fixture(scope="session")
def desk_domain():
    return VoxelDomain(0, 400, 0, 400, 0, 200, 8, 8, 4)


@pytest.fixture(scope="session")
def desk_plane():
    return SensorPlane(0, 400, 0, 400, 8, 8)


@pytest.fixture(scope="session")
def desk_ops(desk_domain, desk_plane):
    return make_operators(desk_domain, desk_plane)


@pytest.fixture(scope="session")
def small_ds(desk_domain, desk_plane, desk_ops):
    spec = DatasetSpec(K=24, lam=0.5, class_a="TOY", class_b="STOCH", generator=DESK_GEN)
    ds = build_dataset(spec, desk_domain, desk_plane, seed=5, operators=desk_ops)
    return split_dataset(ds, 16, 6, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
