import numpy as np
import pytest

from steerpose import so3
from steerpose.network import EquivariantNet, LevelSpec, NetworkSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_net():
    return EquivariantNet(NetworkSpec())


@pytest.fixture(scope="session")
def tiny_net():
    """One-level net with 64 live parameters, used for gradient checks."""
    spec = NetworkSpec(levels=(LevelSpec(even=(4, 0, 1), odd=(0, 2, 0), convs=1, kernel_size=5,
                                         radial_level=2, pool=2),),
                       head="pseudovector", head_kernel_size=3, input_size=8)
    return EquivariantNet(spec)


def random_orthogonal(rng, improper=False):
    r = so3.sample_rotation(rng)
    return -r if improper else r


def smooth_volume(rng, size=16, sigma=1.5):
    from scipy import ndimage
    x = rng.standard_normal((size, size, size))
    return ndimage.gaussian_filter(x, sigma) + 0.5


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("tests.test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
