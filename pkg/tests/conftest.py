import numpy as np
import pytest

from graphdps import fem, network as net
from graphdps.mesh import build_disk_mesh, build_hierarchy


@pytest.fixture(scope="session")
def mesh50():
    return build_disk_mesh(50, 2)


@pytest.fixture(scope="session")
def mesh300():
    return build_disk_mesh(300, 0)


@pytest.fixture(scope="session")
def model50(mesh50):
    el = fem.place_electrodes(mesh50, 8, 0.7)
    return fem.EITModel(mesh50, el, fem.protocol("opposite_adjacent", 8))


@pytest.fixture(scope="session")
def model300(mesh300):
    el = fem.place_electrodes(mesh300, 16, 0.5)
    return fem.EITModel(mesh300, el, fem.protocol("opposite_adjacent", 16))


@pytest.fixture(scope="session")
def tiny_net():
    """Small mesh, two-level hierarchy and an untrained narrow network."""
    m = build_disk_mesh(30, 4)
    h = build_hierarchy(m, 2)
    cfg = net.ScoreNetConfig(hidden_dim=6, depth=2, time_embed_dim=6)
    return m, h, cfg, net.init_params(cfg, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
