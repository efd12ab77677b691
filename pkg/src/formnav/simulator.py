"""Deterministic 2-D kinematic simulation of robots executing velocity commands.

One physics step per planner cycle; the plant is a holonomic point with a
first-order velocity lag. Runs are bitwise reproducible for a given scenario.
"""

from __future__ import annotations

import functools
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .fast_marching import ArrivalTimeField, distance_field
from .formation import FormationSpec
from .geometry import Pose, wrap_angle
from .grid import OccupancyGrid
from .planner import (
    FormationPlanner,
    MapBundle,
    Phase,
    PlannerConfig,
    PlannerFrame,
    VelocityCommand,
    build_map_bundle,
)

DEFAULT_LAG_TAU = 0.15


class ScenarioRunError(Exception):
    """Raised when a scenario cannot start or a planner error surfaces mid-run."""


@dataclass
class RobotState:
    """Kinematic state of one simulated robot."""

    id: int
    pose: Pose
    velocity: np.ndarray  # world frame, m/s
    yaw_rate: float = 0.0


@dataclass
class GoalTrigger:
    """One schedule entry: fire at a time, or whenever the planner is idle."""

    goal: Pose
    at: float | None = None
    on_idle: bool = False

    def __post_init__(self):
        if (self.at is None) == (not self.on_idle):
            raise ValueError("exactly one of 'at' or 'on_idle' must be set")


@dataclass
class Scenario:
    """A complete runnable setup: map, formation, tuning, poses, schedule."""

    name: str
    grid: OccupancyGrid
    formation: FormationSpec
    config: PlannerConfig
    initial_poses: list[Pose]
    schedule: list[GoalTrigger]
    duration_cap: float
    lag_tau: float = DEFAULT_LAG_TAU
    seed: int = 0
    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.schedule:
            raise ValueError("scenario schedule must not be empty")
        if len(self.initial_poses) != self.formation.size:
            raise ValueError(
                f"{len(self.initial_poses)} initial poses for a "
                f"{self.formation.size}-robot formation"
            )
        if not self.duration_cap > 0.0:
            raise ValueError("duration_cap must be positive")


def step(
    states: dict[int, RobotState],
    commands: dict[int, VelocityCommand],
    dt: float,
    tau: float,
) -> dict[int, RobotState]:
    """Advance every robot one step under first-order velocity tracking.

    The velocity relaxes toward the command with the exact first-order
    discretization (gain ``1 - exp(-dt/tau)``), so sampled responses match
    the continuous lag for any step size. ``tau`` = 0 means exact tracking.
    Heading integrates the lagged yaw rate the same way.
    """
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    out: dict[int, RobotState] = {}
    gain = 1.0 if tau <= 0.0 else 1.0 - math.exp(-dt / tau)
    for rid in sorted(states):
        state = states[rid]
        cmd = commands.get(rid)
        v_cmd = np.array([cmd.vx, cmd.vy]) if cmd is not None else np.zeros(2)
        w_cmd = cmd.omega if cmd is not None else 0.0
        if tau <= 0.0:
            velocity = v_cmd.copy()
            yaw_rate = w_cmd
        else:
            velocity = state.velocity + gain * (v_cmd - state.velocity)
            yaw_rate = state.yaw_rate + gain * (w_cmd - state.yaw_rate)
        pose = Pose(
            x=state.pose.x + velocity[0] * dt,
            y=state.pose.y + velocity[1] * dt,
            heading=wrap_angle(state.pose.heading + yaw_rate * dt),
        )
        out[rid] = RobotState(id=rid, pose=pose, velocity=velocity, yaw_rate=yaw_rate)
    return out


@functools.lru_cache(maxsize=8)
def _cached_distance_field(grid: OccupancyGrid) -> ArrivalTimeField:
    return distance_field(grid)


def nearest_obstacle_distance(
    pose: Pose,
    grid: OccupancyGrid,
    *,
    dist: ArrivalTimeField | None = None,
) -> float:
    """Distance from the robot center to the nearest true (uninflated)
    obstacle, sampled bilinearly from the map's distance field."""
    if not grid.geometry.contains_world(pose.x, pose.y):
        raise ValueError(f"pose ({pose.x:.3f}, {pose.y:.3f}) is outside the map")
    if dist is None:
        dist = _cached_distance_field(grid)
    return dist.value_at(pose.x, pose.y)


@dataclass(eq=False)
class MetricsLog:
    """Per-cycle safety and coordination metrics, CSV-serializable."""

    robot_ids: list[int]
    pair_ids: list[tuple[int, int]]
    times: list[float] = field(default_factory=list)
    phases: list[str] = field(default_factory=list)
    leaders: list[int | None] = field(default_factory=list)
    obstacle_dist: list[list[float]] = field(default_factory=list)
    speeds: list[list[float]] = field(default_factory=list)
    positions: list[list[float]] = field(default_factory=list)  # x0, y0, x1, y1, ...
    pairwise: list[list[float]] = field(default_factory=list)

    def append(self, time, phase, leader, obstacle, speeds, positions, pairwise):
        self.times.append(time)
        self.phases.append(phase)
        self.leaders.append(leader)
        self.obstacle_dist.append(obstacle)
        self.speeds.append(speeds)
        self.positions.append(positions)
        self.pairwise.append(pairwise)

    def header(self) -> list[str]:
        cols = ["t", "phase", "leader"]
        cols += [f"obs_r{k}" for k in self.robot_ids]
        cols += [f"speed_r{k}" for k in self.robot_ids]
        for k in self.robot_ids:
            cols += [f"x_r{k}", f"y_r{k}"]
        cols += [f"d_r{a}_r{b}" for a, b in self.pair_ids]
        return cols

    def to_csv(self) -> str:
        lines = [",".join(self.header())]
        for idx in range(len(self.times)):
            row = [repr(self.times[idx]), self.phases[idx]]
            row.append("" if self.leaders[idx] is None else str(self.leaders[idx]))
            row += [repr(v) for v in self.obstacle_dist[idx]]
            row += [repr(v) for v in self.speeds[idx]]
            row += [repr(v) for v in self.positions[idx]]
            row += [repr(v) for v in self.pairwise[idx]]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


@dataclass(eq=False)
class RunResult:
    scenario: Scenario
    metrics: MetricsLog
    frames: list[PlannerFrame]
    status: str  # "completed" | "cap_exceeded" | "truncated"
    summary: dict


class SimulationCore:
    """Owns the planner, robot states, and metrics for one simulation.

    This is the single cycle implementation shared by batch runs and the
    live telemetry server, so both produce identical traces for identical
    goal sequences.
    """

    def __init__(self, scenario: Scenario, *, lag_tau: float | None = None):
        self.scenario = scenario
        self.config = scenario.config
        self.tau = scenario.lag_tau if lag_tau is None else lag_tau
        self.bundle: MapBundle = build_map_bundle(scenario.grid, scenario.config)
        self.planner = FormationPlanner(scenario.formation, scenario.config, self.bundle)
        self.frames: list[PlannerFrame] = []
        robot_ids = list(range(len(scenario.initial_poses)))
        self.states: dict[int, RobotState] = {}
        for rid, pose in zip(robot_ids, scenario.initial_poses):
            cell = scenario.grid.geometry.cell_of_world(pose.x, pose.y)
            if self.bundle.inflated.is_occupied(*cell):
                raise ScenarioRunError(
                    f"initial pose of robot {rid} at ({pose.x:.3f}, {pose.y:.3f}) "
                    "collides with the inflated map"
                )
            self.states[rid] = RobotState(id=rid, pose=pose, velocity=np.zeros(2))
        pairs = [
            (a, b) for i, a in enumerate(robot_ids) for b in robot_ids[i + 1 :]
        ]
        self.metrics = MetricsLog(robot_ids=robot_ids, pair_ids=pairs)
        self.cycle = 0

    @property
    def time(self) -> float:
        return self.cycle * self.config.dt

    @property
    def active(self) -> bool:
        return self.planner.state.phase is not Phase.INACTIVE

    def submit_goal(self, goal: Pose) -> None:
        self.planner.set_formation_goal(goal)

    def poses(self) -> dict[int, Pose]:
        return {rid: state.pose for rid, state in self.states.items()}

    def run_cycle(self) -> PlannerFrame | None:
        """Plan (if active), log metrics, and advance the physics one step."""
        frame: PlannerFrame | None = None
        commands: dict[int, VelocityCommand] = {}
        if self.active:
            commands, frame = self.planner.plan_cycle(self.poses())
            self.frames.append(frame)
        self._log_row(frame)
        self.states = step(self.states, commands, self.config.dt, self.tau)
        self.cycle += 1
        return frame

    def _log_row(self, frame: PlannerFrame | None) -> None:
        phase = frame.phase if frame is not None else Phase.INACTIVE.value
        leader = frame.leader if frame is not None else None
        obstacle = []
        speeds = []
        positions = []
        for rid in self.metrics.robot_ids:
            state = self.states[rid]
            obstacle.append(
                self.bundle.obstacle_distance.value_at(state.pose.x, state.pose.y)
            )
            speeds.append(float(np.linalg.norm(state.velocity)))
            positions.extend([state.pose.x, state.pose.y])
        pairwise = [
            float(np.linalg.norm(self.states[a].pose.xy - self.states[b].pose.xy))
            for a, b in self.metrics.pair_ids
        ]
        self.metrics.append(self.time, phase, leader, obstacle, speeds, positions, pairwise)


def _trigger_ready(trigger: GoalTrigger, time: float, planner_active: bool) -> bool:
    if trigger.on_idle:
        return not planner_active
    return time >= trigger.at - 1e-9


def run_scenario(
    scenario: Scenario,
    *,
    until_cycle: int | None = None,
    lag_tau: float | None = None,
) -> RunResult:
    """Run a scenario to completion, the duration cap, or a cycle limit."""
    core = SimulationCore(scenario, lag_tau=lag_tau)
    pending = deque(scenario.schedule)
    max_cycles = int(math.ceil(scenario.duration_cap * scenario.config.rate_hz))
    settle_tail = int(round(scenario.config.rate_hz))  # one second of coasting
    status = "cap_exceeded"
    tail_left = None
    while core.cycle < max_cycles:
        if until_cycle is not None and core.cycle >= until_cycle:
            status = "truncated"
            break
        while pending and _trigger_ready(pending[0], core.time, core.active):
            trigger = pending.popleft()
            try:
                core.submit_goal(trigger.goal)
            except Exception as exc:
                raise ScenarioRunError(f"goal at t={core.time:.2f} s rejected: {exc}") from exc
        core.run_cycle()
        if tail_left is not None:
            tail_left -= 1
            if tail_left <= 0:
                status = "completed"
                break
        elif not pending and not core.active and core.cycle > 0:
            tail_left = settle_tail
    if status == "cap_exceeded" and tail_left is not None:
        status = "completed"  # converged; the cap only trimmed the settle tail
    summary = summarize(core, status)
    return RunResult(
        scenario=scenario,
        metrics=core.metrics,
        frames=core.frames,
        status=status,
        summary=summary,
    )


def summarize(core: SimulationCore, status: str) -> dict:
    metrics = core.metrics
    leader_switches = 0
    previous = None
    for leader in metrics.leaders:
        if leader is not None and previous is not None and leader != previous:
            leader_switches += 1
        if leader is not None:
            previous = leader
    phase_timeline = []
    for t, phase in zip(metrics.times, metrics.phases):
        if not phase_timeline or phase_timeline[-1][1] != phase:
            phase_timeline.append([t, phase])
    final_error = None
    if status == "completed" and metrics.positions:
        final_error = _settle_error(core.scenario, metrics)
    min_clear = min((min(row) for row in metrics.obstacle_dist), default=None)
    min_pair = min((min(row) for row in metrics.pairwise if row), default=None)
    summary = {
        "scenario": core.scenario.name,
        "status": status,
        "cycles": core.cycle,
        "completion_time": core.time if status == "completed" else None,
        "min_obstacle_clearance": None if min_clear is None else float(min_clear),
        "min_pairwise_distance": None if min_pair is None else float(min_pair),
        "leader_switches": leader_switches,
        "phase_timeline": phase_timeline,
        "max_final_goal_error": final_error,
    }
    verdicts = evaluate_thresholds(core.scenario, metrics, summary)
    summary["thresholds"] = verdicts
    summary["thresholds_met"] = all(v["ok"] for v in verdicts.values()) if verdicts else True
    return summary


def evaluate_thresholds(scenario: Scenario, metrics: MetricsLog, summary: dict) -> dict:
    """Check the scenario's expected-metrics thresholds against a run."""
    thresholds = scenario.thresholds or {}
    verdicts: dict[str, dict] = {}

    if "min_obstacle_clearance" in thresholds:
        bound = float(thresholds["min_obstacle_clearance"])
        observed = summary["min_obstacle_clearance"]
        verdicts["min_obstacle_clearance"] = {
            "bound": bound,
            "observed": observed,
            "ok": bool(observed is not None and observed > bound),
        }
    if "min_pairwise_distance" in thresholds:
        bound = float(thresholds["min_pairwise_distance"])
        observed = summary["min_pairwise_distance"]
        verdicts["min_pairwise_distance"] = {
            "bound": bound,
            "observed": observed,
            "ok": bool(observed is not None and observed > bound),
        }
    if "max_completion_time" in thresholds:
        bound = float(thresholds["max_completion_time"])
        completion = summary["completion_time"]
        verdicts["max_completion_time"] = {
            "bound": bound,
            "observed": completion,
            "ok": summary["status"] == "completed" and completion is not None and completion <= bound,
        }
    if "settle_tolerance" in thresholds:
        bound = float(thresholds["settle_tolerance"])
        ok = False
        worst = None
        if metrics.positions and summary["status"] == "completed":
            # Positions at the end of the run vs the last logged goals.
            worst = _settle_error(scenario, metrics)
            ok = bool(worst is not None and worst <= bound)
        verdicts["settle_tolerance"] = {"bound": bound, "observed": worst, "ok": ok}
    if "corridor_x" in thresholds:
        verdicts["formation_recovery"] = _corridor_recovery_verdict(scenario, metrics)
    return verdicts


def _settle_error(scenario: Scenario, metrics: MetricsLog) -> float | None:
    """Worst robot-to-goal distance at the end of the run, using the final
    schedule goal's transformed base configuration with optimal matching."""
    from .formation import assign_final_goals

    final_goal = scenario.schedule[-1].goal
    goals = final_goal.transform(scenario.formation.base_points)
    last = metrics.positions[-1]
    poses = {
        rid: np.array([last[2 * idx], last[2 * idx + 1]])
        for idx, rid in enumerate(metrics.robot_ids)
    }
    assignment = assign_final_goals(poses, goals)
    return max(
        float(np.linalg.norm(poses[rid] - goals[assignment.role_of(rid)]))
        for rid in metrics.robot_ids
    )


def _corridor_recovery_verdict(scenario: Scenario, metrics: MetricsLog) -> dict:
    """Formation-deformation recovery around a corridor along x.

    Requires pairwise distances within ``settle_fraction`` of the rest length
    just before the first robot enters the corridor x-span, and again from
    ``recover_within_s`` after the last robot exits until the end of the run.
    """
    thresholds = scenario.thresholds
    x0, x1 = (float(v) for v in thresholds["corridor_x"])
    rest = float(thresholds.get("rest_length", 1.0))
    frac = float(thresholds.get("settle_fraction", 0.10))
    recover_within = float(thresholds.get("recover_within_s", 15.0))
    n = len(metrics.robot_ids)

    def xs(row: list[float]) -> list[float]:
        return [row[2 * idx] for idx in range(n)]

    entry_idx = None
    for idx, row in enumerate(metrics.positions):
        if any(x0 <= x <= x1 for x in xs(row)):
            entry_idx = idx
            break
    exit_idx = None
    if entry_idx is not None:
        for idx in range(entry_idx, len(metrics.positions)):
            if all(x > x1 for x in xs(metrics.positions[idx])):
                exit_idx = idx
                break
    if entry_idx is None or exit_idx is None or entry_idx == 0:
        return {"ok": False, "reason": "corridor was not traversed"}

    lo, hi = rest * (1.0 - frac), rest * (1.0 + frac)
    before = metrics.pairwise[entry_idx - 1]
    before_ok = all(lo <= d <= hi for d in before)
    # First time after exit from which the distances stay in band to the end.
    recovered_at = None
    for idx in range(len(metrics.pairwise) - 1, exit_idx - 1, -1):
        if all(lo <= d <= hi for d in metrics.pairwise[idx]):
            recovered_at = metrics.times[idx]
        else:
            break
    after_ok = (
        recovered_at is not None
        and recovered_at <= metrics.times[exit_idx] + recover_within
    )
    return {
        "ok": before_ok and after_ok,
        "entry_time": metrics.times[entry_idx],
        "exit_time": metrics.times[exit_idx],
        "recovered_at": recovered_at,
        "before_ok": before_ok,
        "after_ok": after_ok,
        "bound": [lo, hi],
    }
