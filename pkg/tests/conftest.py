import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dfa3d.geometry import CameraModel  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def axis_cam():
    """Identity extrinsic, fx = fy = 100, principal point (50, 50), 100 x 100 image."""
    return CameraModel(fx=100.0, fy=100.0, u0=50.0, v0=50.0, image_w=100, image_h=100)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
