import numpy as np
import pytest

from ilt.raster import BinaryImage, GridSpec, Polygon, PolygonLayout


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_binary(rng, shape, density=0.5):
    return BinaryImage(GridSpec(shape[1], shape[0]), (rng.random(shape) < density).astype(np.uint8))


def cell_layout(rng, cells, cell, margin, density=0.45):
    """Union of occupied cells on a coarse grid, as one rectangle per cell.

    Returns the layout and the grid it fits on (1 nm/px).
    """
    occupied = rng.random((cells, cells)) < density
    polys = []
    for r, c in np.argwhere(occupied):
        x0, y0 = margin + c * cell, margin + r * cell
        polys.append(Polygon.rect(x0, y0, x0 + cell, y0 + cell))
    side = 2 * margin + cells * cell
    return PolygonLayout(polys), GridSpec.square(side)


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
