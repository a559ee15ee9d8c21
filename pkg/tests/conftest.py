import numpy as np
import pytest

from shapefuse.mesh import TriMesh
from shapefuse.synthetic import generate_world, sample_population

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def world():
    return generate_world(rng_seed=0)


@pytest.fixture(scope="session")
def population(world):
    return sample_population(world, 200, rng_seed=1)


@pytest.fixture
def tetra():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriMesh(v, f, {"a": 0, "b": 1, "c": 2, "d": 3})


@pytest.fixture
def grid_mesh():
    """Flat 6x6 vertex grid in the z=0 plane (open, with a boundary)."""
    n = 6
    xs, ys = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float))
    v = np.stack([xs.ravel(), ys.ravel(), np.zeros(n * n)], axis=1)
    faces = []
    for r in range(n - 1):
        for c in range(n - 1):
            a, b, d, e = r * n + c, r * n + c + 1, (r + 1) * n + c, (r + 1) * n + c + 1
            faces += [[a, b, e], [a, e, d]]
    return TriMesh(v, np.array(faces))
