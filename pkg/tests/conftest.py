import sys

import numpy as np
import pytest

from asinv.mesh import build_rect_mesh


@pytest.fixture(scope="session")
def unit_mesh():
    return build_rect_mesh((0.0, 1.0, 0.0, 1.0), 16, 16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    module = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
