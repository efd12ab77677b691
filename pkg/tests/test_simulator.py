import math

import numpy as np
import pytest

from formnav.formation import ConnectionSpec, FormationSpec
from formnav.geometry import Pose
from formnav.grid import OccupancyGrid
from formnav.planner import PlannerConfig, VelocityCommand
from formnav.simulator import (
    GoalTrigger,
    RobotState,
    Scenario,
    ScenarioRunError,
    nearest_obstacle_distance,
    run_scenario,
    step,
)

from .conftest import bordered_grid, make_grid
from .test_formation import TRIANGLE


def lab_conn(roles):
    return ConnectionSpec(
        roles=roles, rest_length=1.15, k_rep=4.0, k_att=2.0, max_att=0.5,
        b_att=0.1, b_rep=0.1,
    )


def small_scenario(goal=(6.0, 3.0, 0.0), start=(2.0, 2.5), duration=60.0, tau=0.15):
    grid = bordered_grid(160, 110, border=2)
    spec = FormationSpec(
        base_points=TRIANGLE,
        connections=[lab_conn((0, 1)), lab_conn((1, 2)), lab_conn((0, 2))],
    )
    pose = Pose(*start, 0.0)
    pts = pose.transform(TRIANGLE)
    return Scenario(
        name="test-triangle",
        grid=grid,
        formation=spec,
        config=PlannerConfig(),
        initial_poses=[Pose(p[0], p[1], 0.0) for p in pts],
        schedule=[GoalTrigger(goal=Pose(*goal), at=0.0)],
        duration_cap=duration,
        lag_tau=tau,
        thresholds={
            "min_obstacle_clearance": 0.30,
            "min_pairwise_distance": 0.60,
            "settle_tolerance": 0.10,
            "max_completion_time": duration - 1.0,
        },
    )


class TestStep:
    def make_state(self, velocity=(0.0, 0.0)):
        return {0: RobotState(id=0, pose=Pose(1.0, 1.0, 0.0), velocity=np.array(velocity))}

    def test_exact_tracking_euler_step(self):
        states = self.make_state()
        commands = {0: VelocityCommand(0, 0.5, 0.0, 0.0)}
        out = step(states, commands, dt=0.05, tau=0.0)
        assert out[0].pose.x == pytest.approx(1.025)
        assert out[0].pose.y == pytest.approx(1.0)

    def test_command_equal_to_velocity_only_integrates(self):
        states = self.make_state(velocity=(0.2, -0.1))
        commands = {0: VelocityCommand(0, 0.2, -0.1, 0.0)}
        out = step(states, commands, dt=0.05, tau=0.3)
        assert out[0].velocity == pytest.approx([0.2, -0.1])
        assert out[0].pose.x == pytest.approx(1.0 + 0.2 * 0.05)

    def test_first_order_lag_step_response(self):
        # after tau seconds of stepping, the velocity reaches ~63% of command
        tau, dt = 0.2, 0.05
        states = self.make_state()
        commands = {0: VelocityCommand(0, 1.0, 0.0, 0.0)}
        steps = round(tau / dt)
        for _ in range(steps):
            states = step(states, commands, dt=dt, tau=tau)
        expected = 1.0 - math.exp(-1.0)
        assert states[0].velocity[0] == pytest.approx(expected, rel=0.05)

    def test_heading_integration_wraps(self):
        states = {0: RobotState(id=0, pose=Pose(0.0, 0.0, 3.0), velocity=np.zeros(2))}
        commands = {0: VelocityCommand(0, 0.0, 0.0, 10.0)}
        out = step(states, commands, dt=0.05, tau=0.0)
        assert -math.pi < out[0].pose.heading <= math.pi

    def test_missing_command_is_zero(self):
        states = self.make_state(velocity=(0.4, 0.0))
        out = step(states, {}, dt=0.05, tau=0.0)
        assert out[0].velocity == pytest.approx([0.0, 0.0])

    def test_bad_dt(self):
        with pytest.raises(ValueError):
            step(self.make_state(), {}, dt=0.0, tau=0.0)


class TestNearestObstacle:
    def test_adjacent_to_wall(self):
        grid = make_grid(20, 20, occupied_cells=[(10, 10)])
        center = grid.geometry.world_of_cell(11, 10)
        dist = nearest_obstacle_distance(Pose(center[0], center[1], 0.0), grid)
        assert dist == pytest.approx(0.05, abs=1e-9)

    def test_empty_map_sentinel(self):
        grid = make_grid(10, 10)
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            dist = nearest_obstacle_distance(Pose(0.25, 0.25, 0.0), grid)
        assert math.isinf(dist)

    def test_corridor_centerline(self):
        grid = make_grid(40, 34)
        cells = grid.cells.copy()
        cells.flags.writeable = True
        cells[:, :5] = True
        cells[:, 29:] = True
        grid = OccupancyGrid(grid.geometry, cells)
        x, y = grid.geometry.world_of_cell(20, 17)
        dist = nearest_obstacle_distance(Pose(x, y, 0.0), grid)
        assert dist == pytest.approx(0.6, abs=0.05)


class TestRunScenario:
    def test_trivial_scenario_terminates_quickly(self):
        scenario = small_scenario(goal=(2.0, 2.5, 0.0))
        result = run_scenario(scenario)
        assert result.status == "completed"
        assert result.summary["cycles"] <= 3 * 20 + 25  # a few cycles + settle tail
        assert result.summary["thresholds_met"]

    def test_displacement_bounded_by_speed_cap(self):
        scenario = small_scenario(tau=0.0)
        result = run_scenario(scenario, until_cycle=200)
        positions = np.asarray(result.metrics.positions)
        deltas = np.diff(positions, axis=0).reshape(len(positions) - 1, -1, 2)
        step_lengths = np.linalg.norm(deltas, axis=2)
        cap = scenario.config.v_max_x * scenario.config.dt
        assert step_lengths.max() <= cap + 1e-9

    def test_deterministic_metrics(self):
        scenario = small_scenario()
        a = run_scenario(scenario, until_cycle=150)
        b = run_scenario(scenario, until_cycle=150)
        assert a.metrics.to_csv() == b.metrics.to_csv()

    def test_truncation_is_prefix_of_full_run(self):
        scenario = small_scenario()
        full = run_scenario(scenario, until_cycle=120)
        prefix = run_scenario(scenario, until_cycle=60)
        full_lines = full.metrics.to_csv().splitlines()
        prefix_lines = prefix.metrics.to_csv().splitlines()
        assert full_lines[: len(prefix_lines)] == prefix_lines

    def test_initial_collision_rejected(self):
        scenario = small_scenario(start=(0.55, 0.55))  # inside the inflated border
        with pytest.raises(ScenarioRunError, match="collides"):
            run_scenario(scenario)

    def test_goal_in_wall_propagates_with_timestamp(self):
        scenario = small_scenario(goal=(0.05, 0.05, 0.0))
        with pytest.raises(ScenarioRunError, match="t=0.00"):
            run_scenario(scenario)

    def test_metrics_timestamps_strictly_increasing(self):
        scenario = small_scenario()
        result = run_scenario(scenario, until_cycle=100)
        times = np.asarray(result.metrics.times)
        assert np.all(np.diff(times) > 0)
        assert np.allclose(np.diff(times), scenario.config.dt)

    def test_csv_layout(self):
        scenario = small_scenario()
        result = run_scenario(scenario, until_cycle=5)
        lines = result.metrics.to_csv().splitlines()
        header = lines[0].split(",")
        assert header[:3] == ["t", "phase", "leader"]
        assert "obs_r0" in header and "speed_r2" in header
        assert "d_r0_r1" in header and "d_r1_r2" in header
        assert len(lines) == 6
