import numpy as np
import pytest

from robinstokes.config import parse_config_text
from robinstokes.forward import ForwardModel, TimeGrid, default_data
from robinstokes.mesh import build_channel_mesh
from robinstokes.parameters import AdmissibleSet, default_basis


@pytest.fixture(scope="session")
def default_config():
    return parse_config_text("[geometry]\n[time]\n")


@pytest.fixture(scope="session")
def default_model(default_config):
    return default_config.build_model()


@pytest.fixture(scope="session")
def K():
    return AdmissibleSet(0.5, 5.0)


@pytest.fixture(scope="session")
def small_model():
    """Coarse model for fast structural tests (M = 8)."""
    mesh = build_channel_mesh(2.0, 1.0, 8, 4, 2)
    grid = TimeGrid(1.0, 8)
    basis = default_basis(mesh, 1.0, 4, space_nodes=1)
    return ForwardModel(mesh, grid, default_data(1.0, 1.0), basis, window=(0.25, 0.75))


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
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
