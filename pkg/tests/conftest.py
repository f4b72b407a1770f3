import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tonguesim.fem import MaterialParams, assemble
from tonguesim.mesh import make_bar_mesh, select_nodes_near_plane


@pytest.fixture(scope="module")
def bar():
    # 6 x 2 x 2 cells, 0.03 x 0.01 x 0.01 m
    return make_bar_mesh(6, 2, 2, 0.005, 0.005, 0.005)


@pytest.fixture(scope="module")
def bar_anchored(bar):
    anchors = select_nodes_near_plane(bar, "x", 0.0, 1e-9, surface_only=False, role="anchor")
    return bar, anchors, assemble(bar, MaterialParams(), anchors)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, printed once at the end of the run
VERDICTS = {}


@pytest.fixture(scope="session")
def verdicts():
    return VERDICTS


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(VERDICTS, key=lambda k: (int(k.rstrip("ab")), k)):
        ok, line = VERDICTS[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  #{key:<3s} {line}")
