import json

import numpy as np
import pytest

from formnav.cli import main
from formnav.grid import save_pgm

from .conftest import bordered_grid


@pytest.fixture
def tiny_scenario(tmp_path):
    """A fast-running scenario file with its own map, in a temp directory."""
    grid = bordered_grid(120, 90, border=2)
    maps_dir = tmp_path / "maps"
    maps_dir.mkdir()
    save_pgm(grid, maps_dir / "tiny.pgm")
    (maps_dir / "tiny.yaml").write_text("cell_size: 0.05\norigin: [0.0, 0.0]\n")
    r = 1.15 / np.sqrt(3)
    scenario = f"""
schema_version: 1
name: tiny
map:
  image: maps/tiny.pgm
  meta: maps/tiny.yaml
formation:
  base_points:
    - [{r}, 0.0]
    - [{-r / 2}, 0.575]
    - [{-r / 2}, -0.575]
  connections:
    - {{roles: [1, 2], rest_length: 1.15, k_rep: 4.0, k_att: 2.0, max_att: 0.5, b_att: 0.1, b_rep: 0.1}}
    - {{roles: [2, 3], rest_length: 1.15, k_rep: 4.0, k_att: 2.0, max_att: 0.5, b_att: 0.1, b_rep: 0.1}}
    - {{roles: [1, 3], rest_length: 1.15, k_rep: 4.0, k_att: 2.0, max_att: 0.5, b_att: 0.1, b_rep: 0.1}}
robots:
  - [2.1, 2.2, 0.0]
  - [1.1, 2.8, 0.0]
  - [1.1, 1.6, 0.0]
schedule:
  - at: 0.0
    goal: [4.0, 2.2, 0.0]
duration_cap: 60.0
thresholds:
  min_obstacle_clearance: 0.30
  min_pairwise_distance: 0.60
  settle_tolerance: 0.10
  max_completion_time: 55.0
"""
    path = tmp_path / "tiny.yaml"
    path.write_text(scenario)
    return path


class TestRun:
    def test_successful_run_exit_zero(self, tiny_scenario, tmp_path, capsys):
        out = tmp_path / "out"
        code = main(["run", str(tiny_scenario), "--out", str(out)])
        assert code == 0
        assert (out / "metrics.csv").exists()
        assert (out / "frames.ndjson").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["status"] == "completed"
        assert summary["thresholds_met"] is True
        printed = capsys.readouterr().out
        assert "status: completed" in printed

    def test_threshold_violation_exit_one(self, tiny_scenario, tmp_path):
        text = tiny_scenario.read_text().replace(
            "max_completion_time: 55.0", "max_completion_time: 0.1"
        )
        tiny_scenario.write_text(text)
        code = main(["run", str(tiny_scenario), "--out", str(tmp_path / "out2")])
        assert code == 1

    def test_malformed_scenario_exit_two(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("schema_version: 1\nname: broken\n")
        code = main(["run", str(bad), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "scenario.map" in capsys.readouterr().err

    def test_until_cycle_prefix_property(self, tiny_scenario, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        assert main(["run", str(tiny_scenario), "--out", str(out_a), "--until-cycle", "80"]) == 0
        assert main(["run", str(tiny_scenario), "--out", str(out_b), "--until-cycle", "40"]) == 0
        full = (out_a / "metrics.csv").read_text().splitlines()
        prefix = (out_b / "metrics.csv").read_text().splitlines()
        assert full[: len(prefix)] == prefix

    def test_exit_code_derives_from_written_summary(self, tiny_scenario, tmp_path):
        out = tmp_path / "out3"
        code = main(["run", str(tiny_scenario), "--out", str(out)])
        summary = json.loads((out / "summary.json").read_text())
        assert (code == 0) == summary["thresholds_met"]


class TestPlan:
    def test_exports_six_artifacts(self, tmp_path):
        from formnav.scenarios import find_scenario

        bundle = find_scenario("lab-unstructured")
        out = tmp_path / "plan"
        code = main([
            "plan", str(bundle.map_image), "--meta", str(bundle.map_meta),
            "--start", "1.0,3.2", "--goal", "7.8,3.3", "--safe-dist", "0.5",
            "--out", str(out),
        ])
        assert code == 0
        names = {p.name for p in out.iterdir()}
        assert names == {
            "grid.npy", "inflated.npy", "distance.npy",
            "velocity.npy", "arrival.npy", "path.csv",
        }
        velocity = np.load(out / "velocity.npy")
        assert velocity.min() >= 0.0 and velocity.max() <= 1.0

    def test_start_equals_goal(self, tmp_path):
        from formnav.scenarios import find_scenario

        bundle = find_scenario("lab-unstructured")
        out = tmp_path / "plan0"
        code = main([
            "plan", str(bundle.map_image), "--meta", str(bundle.map_meta),
            "--start", "1.0,3.2", "--goal", "1.0,3.2", "--safe-dist", "0.5",
            "--out", str(out),
        ])
        assert code == 0
        path_lines = (out / "path.csv").read_text().splitlines()
        assert len(path_lines) == 2  # header + single vertex
        assert path_lines[1].endswith(",0.0")

    def test_goal_in_wall_exit_two(self, tmp_path, capsys):
        from formnav.scenarios import find_scenario

        bundle = find_scenario("lab-unstructured")
        code = main([
            "plan", str(bundle.map_image), "--meta", str(bundle.map_meta),
            "--start", "1.0,3.2", "--goal", "0.02,0.02", "--safe-dist", "0.5",
            "--out", str(tmp_path / "never"),
        ])
        assert code == 2


class TestValidate:
    def test_valid(self, tiny_scenario, capsys):
        assert main(["validate", str(tiny_scenario)]) == 0
        assert "ok: tiny" in capsys.readouterr().out

    def test_invalid(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("not: a scenario\n")
        assert main(["validate", str(bad)]) == 2
