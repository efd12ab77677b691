import numpy as np
import pytest

from formnav.grid import GridGeometry, OccupancyGrid, ScalarField


@pytest.fixture(scope="session", autouse=True)
def warm_solver():
    """Trigger the jit compile once so timed tests measure the solve."""
    from formnav.fast_marching import solve_eikonal

    geom = GridGeometry(4, 4, 1.0)
    solve_eikonal(ScalarField(geom, np.ones((4, 4))), [(0, 0)])


@pytest.fixture
def empty_grid_101():
    geom = GridGeometry(101, 101, 0.05)
    return OccupancyGrid(geom, np.zeros((101, 101), dtype=bool))


@pytest.fixture
def uniform_speed_101():
    geom = GridGeometry(101, 101, 0.05)
    return ScalarField(geom, np.ones((101, 101)))


def make_grid(width, height, cell_size=0.05, occupied_cells=(), origin=(0.0, 0.0)):
    geom = GridGeometry(width, height, cell_size, origin)
    cells = np.zeros((width, height), dtype=bool)
    for i, j in occupied_cells:
        cells[i, j] = True
    return OccupancyGrid(geom, cells)


def bordered_grid(width, height, cell_size=0.05, border=2):
    """Grid with occupied border cells of the given thickness."""
    geom = GridGeometry(width, height, cell_size)
    cells = np.zeros((width, height), dtype=bool)
    cells[:border, :] = True
    cells[-border:, :] = True
    cells[:, :border] = True
    cells[:, -border:] = True
    return OccupancyGrid(geom, cells)


@pytest.fixture
def cluttered_map():
    """A small cluttered map with a wall gap, in the style of the planning
    figures: bordered, two blocks leaving an off-center passage."""
    grid = bordered_grid(120, 80, cell_size=0.05, border=2)
    cells = grid.cells.copy()
    cells.flags.writeable = True
    cells[40:46, 0:30] = True    # lower wall segment
    cells[40:46, 54:80] = True   # upper wall segment (gap j in [30, 54))
    cells[80:90, 25:55] = True   # a block later on
    return OccupancyGrid(grid.geometry, cells)
