import sys

import numpy as np
import pytest
import torch

from mgicnn.synthetic import SyntheticSpec, generate
from mgicnn.volume_io import Volume

torch.set_num_threads(1)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiments")


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    return SyntheticSpec(num_scans=5, volume_shape=(48, 48, 24), nodules_per_scan=2, distractors_per_scan=3, seed=11)


@pytest.fixture(scope="session")
def small_data(small_spec):
    return generate(small_spec)


def sphere_volume(shape_zyx=(30, 64, 64), radius_vox=5.0, value=50, series_id="sphere"):
    """Air volume with an isotropic sphere at the exact grid centre."""
    z, y, x = np.indices(shape_zyx)
    cz, cy, cx = (s // 2 for s in shape_zyx)
    vox = np.full(shape_zyx, -1000, np.int16)
    vox[(z - cz) ** 2 + (y - cy) ** 2 + (x - cx) ** 2 <= radius_vox**2] = value
    return Volume(vox, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), series_id)
