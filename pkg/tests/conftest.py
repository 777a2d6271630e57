import numpy as np
import pytest

from semloc import simulator
from semloc.geometry import OrientedBox3, yaw_matrix
from semloc.worldmodel import FREE, OCCUPIED, FloorPlan, MapObject


def box(x, y, z=0.5, W=1.0, H=1.0, L=1.0, yaw=0.0):
    return OrientedBox3([x, y, z], [W, H, L], yaw_matrix(yaw))


def obj(i, cls, x, y, **kw):
    return MapObject(i, cls, box(x, y, **kw))


def two_room_grid(res=0.1, door=True):
    """10 m x 5 m, wall at x = 5 m with a 1.2 m door, border walls."""
    g = np.full((50, 100), FREE, dtype=np.uint8)
    g[0, :] = g[-1, :] = OCCUPIED
    g[:, 0] = g[:, -1] = OCCUPIED
    g[:, 50] = OCCUPIED
    if door:
        g[19:31, 50] = FREE
    return FloorPlan(g, res)


@pytest.fixture
def plan():
    return two_room_grid()


@pytest.fixture(scope="session")
def small_world():
    spec = simulator.WorldSpec(n_objects=10)
    noise = simulator.default_noise(spec.classes, cov=((0.01, 0.0), (0.0, 0.005)))
    return simulator.generate_world(0, spec, noise)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
