#!/usr/bin/env python3
"""Author the bundled scenario maps as PGM + metadata files.

Obstacle layouts are hand-placed to match the geometric intent of the
bundled experiments (gap and corridor widths relative to formation size);
rerun after editing the layout tables below.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

import sys

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from formnav.grid import GridGeometry, OccupancyGrid, save_pgm  # noqa: E402

CELL = 0.05
BORDER = 0.10

# name -> (extent_x, extent_y, rectangles [x0, x1, y0, y1], disks [cx, cy, r])
MAPS = {
    "sim_clutter": (
        14.0,
        10.0,
        [
            (4.0, 4.4, 0.0, 4.25),     # gap wall, lower part
            (4.0, 4.4, 5.75, 10.0),    # gap wall, upper part (gap width 1.5)
            (6.8, 7.6, 6.2, 8.0),
            (10.6, 11.6, 1.0, 2.2),
            (10.4, 11.2, 7.0, 8.4),
        ],
        [
            (7.5, 2.3, 0.50),
            (9.6, 5.1, 0.22),
        ],
    ),
    "sim_cone": (
        10.0,
        7.0,
        [],
        [
            (5.0, 3.5, 0.18),
        ],
    ),
    "lab_clutter": (
        9.5,
        6.5,
        [
            (3.2, 3.9, 0.0, 2.55),
            (3.2, 3.9, 3.75, 6.5),     # gap width 1.2
            (5.7, 6.4, 4.2, 5.1),
        ],
        [
            (6.1, 1.9, 0.35),
        ],
    ),
    "lab_corridor": (
        9.5,
        6.5,
        # Solid block spanning x in [3.2, 6.3], carved by two offset passage
        # rectangles (handled below) to form a 1.2 m wide corridor with a bend.
        [],
        [],
    ),
}

CORRIDOR_BLOCK = (3.2, 6.3)
CORRIDOR_PASSAGES = [
    (3.2, 5.5, 2.2, 3.4),
    (4.3, 6.3, 3.1, 4.3),
]


def rasterize(name: str) -> OccupancyGrid:
    extent_x, extent_y, rects, disks = MAPS[name]
    width = round(extent_x / CELL)
    height = round(extent_y / CELL)
    geom = GridGeometry(width, height, CELL)
    xs = (np.arange(width) + 0.5) * CELL
    ys = (np.arange(height) + 0.5) * CELL
    cx, cy = np.meshgrid(xs, ys, indexing="ij")

    occ = (
        (cx < BORDER)
        | (cx > extent_x - BORDER)
        | (cy < BORDER)
        | (cy > extent_y - BORDER)
    )
    for x0, x1, y0, y1 in rects:
        occ |= (cx >= x0) & (cx <= x1) & (cy >= y0) & (cy <= y1)
    for dx, dy, r in disks:
        occ |= (cx - dx) ** 2 + (cy - dy) ** 2 <= r * r
    if name == "lab_corridor":
        x0, x1 = CORRIDOR_BLOCK
        block = (cx >= x0) & (cx <= x1)
        for px0, px1, py0, py1 in CORRIDOR_PASSAGES:
            block &= ~((cx >= px0) & (cx <= px1) & (cy >= py0) & (cy <= py1))
        occ |= block
    return OccupancyGrid(geom, occ)


def main() -> None:
    out_dir = Path(__file__).resolve().parents[1] / "src" / "formnav" / "scenarios" / "data" / "maps"
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in MAPS:
        grid = rasterize(name)
        save_pgm(grid, out_dir / f"{name}.pgm")
        (out_dir / f"{name}.yaml").write_text(
            f"cell_size: {CELL}\norigin: [0.0, 0.0]\noccupied_threshold: 127\n",
            encoding="utf-8",
        )
        print(
            f"{name}: {grid.geometry.width}x{grid.geometry.height} cells, "
            f"{grid.occupied_count()} occupied"
        )


if __name__ == "__main__":
    main()
