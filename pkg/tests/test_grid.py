import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from formnav.grid import (
    GridGeometry,
    MapError,
    OccupancyGrid,
    ScalarField,
    inflate,
    load_map,
    save_pgm,
)

from .conftest import make_grid
from .oracles import inflation_disk


def write_map(tmp_path, pixels, cell_size=0.05, threshold=127, mode="L"):
    image_path = tmp_path / "map.pgm" if mode == "L" else tmp_path / "map.png"
    Image.fromarray(pixels, mode=mode).save(image_path)
    meta_path = tmp_path / "map.yaml"
    meta_path.write_text(
        f"cell_size: {cell_size}\norigin: [0.0, 0.0]\noccupied_threshold: {threshold}\n"
    )
    return image_path, meta_path


class TestGeometry:
    def test_cell_world_round_trip(self):
        geom = GridGeometry(40, 30, 0.05, origin=(-1.0, 2.0))
        for i, j in [(0, 0), (39, 29), (7, 21)]:
            x, y = geom.world_of_cell(i, j)
            assert geom.cell_of_world(x, y) == (i, j)

    @given(
        i=st.integers(0, 99),
        j=st.integers(0, 79),
        cell=st.floats(0.01, 2.0),
        ox=st.floats(-10, 10),
        oy=st.floats(-10, 10),
    )
    @settings(max_examples=200)
    def test_round_trip_property(self, i, j, cell, ox, oy):
        geom = GridGeometry(100, 80, cell, origin=(ox, oy))
        x, y = geom.world_of_cell(i, j)
        assert geom.cell_of_world(x, y) == (i, j)

    def test_invalid_geometry(self):
        with pytest.raises(ValueError):
            GridGeometry(0, 10, 0.05)
        with pytest.raises(ValueError):
            GridGeometry(10, 10, 0.0)
        with pytest.raises(ValueError):
            GridGeometry(10, 10, -1.0)


class TestLoadMap:
    def test_all_white_is_empty(self, tmp_path):
        image, meta = write_map(tmp_path, np.full((2, 2), 255, dtype=np.uint8))
        grid = load_map(image, meta)
        assert grid.occupied_count() == 0

    def test_all_black_is_full(self, tmp_path):
        image, meta = write_map(tmp_path, np.zeros((2, 2), dtype=np.uint8))
        grid = load_map(image, meta)
        assert grid.occupied_count() == 4

    def test_threshold_boundary(self, tmp_path):
        pixels = np.array([[127, 128], [0, 255]], dtype=np.uint8)
        image, meta = write_map(tmp_path, pixels)
        grid = load_map(image, meta)
        # at-threshold is occupied, above is free
        assert grid.occupied_count() == 2

    def test_paper_scale_map_dimensions(self, tmp_path):
        # 14 m x 10 m at 0.05 m cells
        pixels = np.full((200, 280), 255, dtype=np.uint8)
        image, meta = write_map(tmp_path, pixels)
        grid = load_map(image, meta)
        assert (grid.geometry.width, grid.geometry.height) == (280, 200)
        assert grid.geometry.extent == (14.0, 10.0)

    def test_row_order_world_y_up(self, tmp_path):
        pixels = np.full((3, 3), 255, dtype=np.uint8)
        pixels[0, :] = 0  # top image row
        image, meta = write_map(tmp_path, pixels)
        grid = load_map(image, meta)
        # the top of the picture is the highest j row
        assert grid.cells[:, 2].all()
        assert not grid.cells[:, 0].any()

    def test_missing_file(self, tmp_path):
        _, meta = write_map(tmp_path, np.full((2, 2), 255, dtype=np.uint8))
        with pytest.raises(MapError, match="not found"):
            load_map(tmp_path / "nope.pgm", meta)
        with pytest.raises(MapError, match="metadata"):
            load_map(tmp_path / "map.pgm", tmp_path / "nope.yaml")

    def test_non_grayscale_rejected(self, tmp_path):
        pixels = np.zeros((2, 2, 3), dtype=np.uint8)
        image, meta = write_map(tmp_path, pixels, mode="RGB")
        with pytest.raises(MapError, match="grayscale"):
            load_map(image, meta)

    def test_bad_cell_size(self, tmp_path):
        image, _ = write_map(tmp_path, np.full((2, 2), 255, dtype=np.uint8))
        meta = tmp_path / "bad.yaml"
        meta.write_text("cell_size: -0.05\n")
        with pytest.raises(MapError, match="positive"):
            load_map(image, meta)

    def test_pgm_round_trip(self, tmp_path):
        grid = make_grid(9, 7, occupied_cells=[(1, 1), (4, 5), (8, 0)])
        save_pgm(grid, tmp_path / "rt.pgm")
        (tmp_path / "rt.yaml").write_text("cell_size: 0.05\n")
        loaded = load_map(tmp_path / "rt.pgm", tmp_path / "rt.yaml")
        assert np.array_equal(loaded.cells, grid.cells)


class TestInflate:
    def test_radius_zero_is_identity(self):
        grid = make_grid(10, 10, occupied_cells=[(3, 4), (7, 2)])
        out = inflate(grid, 0.0)
        assert np.array_equal(out.cells, grid.cells)

    def test_single_cell_two_cell_radius_disk(self):
        h = 0.05
        grid = make_grid(11, 11, cell_size=h, occupied_cells=[(5, 5)])
        out = inflate(grid, 2 * h)
        expected = {(5 + di, 5 + dj) for di, dj in inflation_disk(2.0)}
        got = {tuple(c) for c in np.argwhere(out.cells)}
        assert got == expected
        assert len(got) == 13

    def test_paper_inflation_radius_disk(self):
        # 0.30 m at 0.05 m cells: six-cell radius
        grid = make_grid(21, 21, occupied_cells=[(10, 10)])
        out = inflate(grid, 0.30)
        expected = {(10 + di, 10 + dj) for di, dj in inflation_disk(6.0)}
        assert {tuple(c) for c in np.argwhere(out.cells)} == expected

    @given(st.data())
    @settings(max_examples=60, deadline=None)
    def test_monotone_and_composable(self, data):
        cells = data.draw(
            st.lists(
                st.tuples(st.integers(0, 14), st.integers(0, 14)),
                min_size=1,
                max_size=6,
                unique=True,
            )
        )
        r1 = data.draw(st.floats(0.0, 0.3))
        r2 = data.draw(st.floats(0.0, 0.3))
        grid = make_grid(15, 15, occupied_cells=cells)
        small = inflate(grid, r1)
        # occupied set only grows
        assert (grid.cells <= small.cells).all()
        # composing inflations covers the larger single inflation
        composed = inflate(inflate(grid, r1), r2)
        single = inflate(grid, max(r1, r2))
        assert (single.cells <= composed.cells).all()

    def test_negative_radius_rejected(self):
        with pytest.raises(ValueError):
            inflate(make_grid(5, 5, occupied_cells=[(2, 2)]), -0.1)


class TestScalarField:
    def test_bilinear_between_centers(self):
        geom = GridGeometry(2, 1, 1.0)
        sfield = ScalarField(geom, np.array([[1.0], [3.0]]))
        assert sfield.sample_bilinear(1.0, 0.5) == pytest.approx(2.0)

    def test_bilinear_skips_non_finite_corners(self):
        geom = GridGeometry(2, 1, 1.0)
        sfield = ScalarField(geom, np.array([[1.0], [np.inf]]))
        assert sfield.sample_bilinear(1.0, 0.5) == pytest.approx(1.0)

    def test_bilinear_all_non_finite_is_unreached(self):
        geom = GridGeometry(2, 1, 1.0)
        sfield = ScalarField(geom, np.full((2, 1), np.inf))
        assert sfield.sample_bilinear(1.0, 0.5) == np.inf

    def test_out_of_bounds_cell_value(self):
        geom = GridGeometry(2, 2, 1.0)
        sfield = ScalarField(geom, np.ones((2, 2)))
        assert sfield.value_at_cell(-1, 0) == np.inf
        grid = OccupancyGrid(geom, np.zeros((2, 2), dtype=bool))
        assert grid.is_occupied(2, 0)
