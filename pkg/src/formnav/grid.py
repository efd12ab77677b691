"""Occupancy grids, scalar fields, and the shared cell/world indexing scheme.

Cells are indexed ``(i, j)`` with ``i`` along world x and ``j`` along world y,
so arrays have shape ``(width, height)``. Cell ``(0, 0)`` has its corner at the
grid origin and world +y points toward increasing ``j``. Out-of-bounds cells
are treated as occupied by everything downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import yaml
from PIL import Image
from scipy import ndimage

UNREACHED = float("inf")


class MapError(Exception):
    """Raised when a map image or its metadata cannot be ingested."""


@dataclass(frozen=True)
class GridGeometry:
    """Grid shape plus the world transform of cell (0, 0)'s corner."""

    width: int
    height: int
    cell_size: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        if not (self.cell_size > 0.0):
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")

    def cell_of_world(self, x: float, y: float) -> tuple[int, int]:
        """Containing cell of a world point (may be out of bounds)."""
        ox, oy = self.origin
        return (int(math.floor((x - ox) / self.cell_size)), int(math.floor((y - oy) / self.cell_size)))

    def world_of_cell(self, i: int, j: int) -> tuple[float, float]:
        """World coordinates of a cell's center."""
        ox, oy = self.origin
        return (ox + (i + 0.5) * self.cell_size, oy + (j + 0.5) * self.cell_size)

    def in_bounds(self, i: int, j: int) -> bool:
        return 0 <= i < self.width and 0 <= j < self.height

    def contains_world(self, x: float, y: float) -> bool:
        return self.in_bounds(*self.cell_of_world(x, y))

    @property
    def extent(self) -> tuple[float, float]:
        """Map size in meters, (x, y)."""
        return (self.width * self.cell_size, self.height * self.cell_size)


def _readonly(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(eq=False)
class OccupancyGrid:
    """Binary obstacle map. Immutable after construction."""

    geometry: GridGeometry
    cells: np.ndarray  # bool, shape (width, height), True = occupied

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=bool)
        if cells.shape != (self.geometry.width, self.geometry.height):
            raise ValueError(
                f"cells shape {cells.shape} does not match geometry "
                f"{(self.geometry.width, self.geometry.height)}"
            )
        self.cells = _readonly(cells)

    def is_occupied(self, i: int, j: int) -> bool:
        """Occupancy with the conservative out-of-bounds convention."""
        if not self.geometry.in_bounds(i, j):
            return True
        return bool(self.cells[i, j])

    def occupied_count(self) -> int:
        return int(self.cells.sum())


@dataclass(eq=False)
class ScalarField:
    """Real-valued grid sharing the occupancy indexing scheme.

    ``UNREACHED`` (+inf) marks cells with no defined value. Immutable after
    construction.
    """

    geometry: GridGeometry
    values: np.ndarray  # float64, shape (width, height)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.geometry.width, self.geometry.height):
            raise ValueError(
                f"values shape {values.shape} does not match geometry "
                f"{(self.geometry.width, self.geometry.height)}"
            )
        self.values = _readonly(values)

    def value_at_cell(self, i: int, j: int) -> float:
        if not self.geometry.in_bounds(i, j):
            return UNREACHED
        return float(self.values[i, j])

    def sample_bilinear(self, x: float, y: float) -> float:
        """Bilinear sample at a world point, between cell centers.

        Edge cells replicate outward. Non-finite corners are dropped and the
        remaining weights renormalized; returns ``UNREACHED`` when no corner
        is finite.
        """
        geom = self.geometry
        u = (x - geom.origin[0]) / geom.cell_size - 0.5
        v = (y - geom.origin[1]) / geom.cell_size - 0.5
        u = min(max(u, 0.0), geom.width - 1.0)
        v = min(max(v, 0.0), geom.height - 1.0)
        i0 = min(int(math.floor(u)), geom.width - 2) if geom.width > 1 else 0
        j0 = min(int(math.floor(v)), geom.height - 2) if geom.height > 1 else 0
        tx = u - i0
        ty = v - j0
        i1 = min(i0 + 1, geom.width - 1)
        j1 = min(j0 + 1, geom.height - 1)

        corners = (
            (self.values[i0, j0], (1.0 - tx) * (1.0 - ty)),
            (self.values[i1, j0], tx * (1.0 - ty)),
            (self.values[i0, j1], (1.0 - tx) * ty),
            (self.values[i1, j1], tx * ty),
        )
        total = 0.0
        weight = 0.0
        for value, w in corners:
            if math.isfinite(value) and w > 0.0:
                total += value * w
                weight += w
        if weight <= 0.0:
            return UNREACHED
        return total / weight


def inflate(grid: OccupancyGrid, radius: float) -> OccupancyGrid:
    """Dilate occupied cells by a Euclidean center-to-center radius in meters."""
    if radius < 0.0:
        raise ValueError(f"inflation radius must be >= 0, got {radius}")
    if radius == 0.0 or not grid.cells.any():
        return OccupancyGrid(grid.geometry, grid.cells.copy())
    r_cells = radius / grid.geometry.cell_size
    n = int(math.floor(r_cells + 1e-9))
    offsets = np.arange(-n, n + 1)
    di, dj = np.meshgrid(offsets, offsets, indexing="ij")
    footprint = di * di + dj * dj <= r_cells * r_cells + 1e-9
    dilated = ndimage.binary_dilation(grid.cells, structure=footprint)
    return OccupancyGrid(grid.geometry, dilated)


def load_map(image_path, meta_path) -> OccupancyGrid:
    """Load an occupancy grid from a grayscale image and a metadata file.

    The metadata file is a YAML mapping with ``cell_size`` (meters, required),
    ``origin`` ([x, y], default [0, 0]) and ``occupied_threshold`` (default
    127). Pixels at or below the threshold are occupied. Image rows are
    flipped so that world +y points up.
    """
    try:
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise MapError(f"map metadata file not found: {meta_path}") from exc
    except yaml.YAMLError as exc:
        raise MapError(f"malformed map metadata {meta_path}: {exc}") from exc
    if not isinstance(meta, dict):
        raise MapError(f"map metadata {meta_path} must be a key-value mapping")

    try:
        cell_size = float(meta["cell_size"])
    except KeyError as exc:
        raise MapError(f"map metadata {meta_path} is missing cell_size") from exc
    if not cell_size > 0.0:
        raise MapError(f"cell_size must be positive, got {cell_size}")
    origin = meta.get("origin", [0.0, 0.0])
    if not (isinstance(origin, (list, tuple)) and len(origin) == 2):
        raise MapError(f"origin must be a [x, y] pair, got {origin!r}")
    threshold = int(meta.get("occupied_threshold", 127))

    try:
        image = Image.open(image_path)
    except FileNotFoundError as exc:
        raise MapError(f"map image not found: {image_path}") from exc
    except Exception as exc:
        raise MapError(f"cannot read map image {image_path}: {exc}") from exc
    with image:
        if image.mode != "L":
            raise MapError(f"map image must be 8-bit grayscale, got mode {image.mode!r}")
        pixels = np.asarray(image, dtype=np.uint8)

    occupied = pixels <= threshold
    # Image row 0 is the top of the picture; grid j grows upward.
    cells = occupied[::-1, :].T
    geometry = GridGeometry(
        width=cells.shape[0],
        height=cells.shape[1],
        cell_size=cell_size,
        origin=(float(origin[0]), float(origin[1])),
    )
    return OccupancyGrid(geometry, cells)


def save_pgm(grid: OccupancyGrid, image_path) -> None:
    """Write the grid as a binary PGM (occupied = 0, free = 255)."""
    pixels = np.where(grid.cells.T[::-1, :], 0, 255).astype(np.uint8)
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii")
    with open(image_path, "wb") as fh:
        fh.write(header)
        fh.write(pixels.tobytes())
