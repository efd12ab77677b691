"""The 20 Hz formation planning loop.

Each cycle runs, in order: leader selection on the wide-clearance map,
follower role assignment, the look-ahead state test, goal assignment
(partial or final), local path planning, spring-damper velocity shaping,
gradient-projection obstacle avoidance, velocity caps, and yaw alignment.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .fast_marching import (
    ArrivalTimeField,
    DescentError,
    PlannedPath,
    UnreachableGoalError,
    VelocityMap,
    build_velocity_map,
    distance_field,
    extract_path,
    sobel_gradient,
    solve_eikonal,
)
from .formation import (
    ConnectionSpec,
    FormationSpec,
    LeaderSelectionError,
    RoleAssignment,
    assign_final_goals,
    assign_follower_roles,
    select_leader,
)
from .geometry import Pose, rotation_matrix, wrap_angle
from .grid import OccupancyGrid, ScalarField, inflate

_FIELD_CACHE_SIZE = 64


class GoalValidationError(Exception):
    """Raised when a formation goal cannot be accepted."""


class PlannerStateError(Exception):
    """Raised when an operation is invalid for the current planner phase."""


class Phase(Enum):
    INACTIVE = "inactive"
    PARTIAL_GOAL = "partial_goal"
    FINAL_GOAL = "final_goal"


@dataclass
class PlannerConfig:
    """Tuning parameters for the formation planner."""

    rate_hz: float = 20.0
    lookahead: float = 2.5  # normalized seconds
    d_switch: float = 0.05  # normalized seconds of leader hysteresis
    w_min_partial: float = 0.70
    w_min_avoid: float = 0.50
    d_safe_a: float = 1.50  # meters, leader-map saturation distance
    d_safe_b: float = 0.50  # meters, follower-map saturation distance
    inflation_radius: float = 0.30  # meters
    v_max_x: float = 0.50  # m/s
    v_max_y: float = 0.20  # m/s
    v_min: float = 0.05  # m/s floor of the proximity cap
    d_slowdown: float = 0.40  # meters
    goal_tolerance: float = 0.10  # meters
    yaw_gain: float = 2.0  # 1/s
    max_yaw_rate: float = 1.5  # rad/s
    yaw_deadband: float = 0.02  # m/s below which yaw holds

    def __post_init__(self):
        positive = (
            "rate_hz", "lookahead", "d_switch", "d_safe_a", "d_safe_b",
            "inflation_radius", "v_max_x", "v_max_y", "v_min", "d_slowdown",
            "goal_tolerance", "yaw_gain", "max_yaw_rate",
        )
        for name in positive:
            if not getattr(self, name) > 0.0:
                raise ValueError(f"config {name} must be positive, got {getattr(self, name)}")
        for name in ("w_min_partial", "w_min_avoid"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"config {name} must lie in (0, 1), got {getattr(self, name)}")
        if self.v_max_y > self.v_max_x:
            raise ValueError(
                f"v_max_y {self.v_max_y} must not exceed v_max_x {self.v_max_x}"
            )

    @property
    def dt(self) -> float:
        return 1.0 / self.rate_hz


@dataclass
class VelocityCommand:
    """World-frame velocity plus yaw rate for one robot."""

    robot: int
    vx: float
    vy: float
    omega: float

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


@dataclass(eq=False)
class MapBundle:
    """All grids the planner needs, derived once from a static map."""

    grid: OccupancyGrid
    inflated: OccupancyGrid
    w_a: VelocityMap
    w_b: VelocityMap
    obstacle_distance: ArrivalTimeField  # from the uninflated map, for metrics
    inflated_distance: ArrivalTimeField  # from the inflated map, for recovery


def build_map_bundle(grid: OccupancyGrid, config: PlannerConfig) -> MapBundle:
    inflated = inflate(grid, config.inflation_radius)
    inflated_dist = distance_field(inflated)

    def saturate(safe: float) -> VelocityMap:
        values = np.minimum(inflated_dist.field.values / safe, 1.0)
        values = np.where(inflated.cells, 0.0, values)
        return VelocityMap(ScalarField(grid.geometry, values), safe)

    return MapBundle(
        grid=grid,
        inflated=inflated,
        w_a=saturate(config.d_safe_a),
        w_b=saturate(config.d_safe_b),
        obstacle_distance=distance_field(grid),
        inflated_distance=inflated_dist,
    )


@dataclass
class ConnectionMemory:
    """Previous cycle's robot pair and length for one connection."""

    pair: tuple[int, int] | None = None
    length: float = 0.0


@dataclass(eq=False)
class PlannerState:
    phase: Phase = Phase.INACTIVE
    formation_goal: Pose | None = None
    final_goals: np.ndarray | None = None  # (N, 2) per-role world points
    assignment: RoleAssignment | None = None
    conn_memory: list[ConnectionMemory] = field(default_factory=list)
    paths: dict[int, PlannedPath | None] = field(default_factory=dict)


@dataclass(eq=False)
class RobotFrame:
    robot: int
    goal: tuple[float, float] | None
    path: list[tuple[float, float]] | None
    eta: float | None
    v_des: tuple[float, float]
    v: tuple[float, float]
    v_prime: tuple[float, float]
    v_star: tuple[float, float]
    omega: float
    caps: dict[str, float]
    cap_active: str
    w_value: float
    flags: list[str]


@dataclass(eq=False)
class ConnectionFrame:
    roles: tuple[int, int]
    robots: tuple[int, int] | None
    length: float | None
    spring: float
    damping: float
    fresh: bool


@dataclass(eq=False)
class PlannerFrame:
    """Full diagnostic record of one planning cycle."""

    cycle: int
    time: float
    phase: str
    leader: int | None
    converged: bool
    robots: dict[int, RobotFrame]
    connections: list[ConnectionFrame]
    events: list[str]

    def to_dict(self) -> dict:
        return {
            "cycle": self.cycle,
            "time": self.time,
            "phase": self.phase,
            "leader": self.leader,
            "converged": self.converged,
            "events": list(self.events),
            "robots": {
                str(k): {
                    "goal": list(r.goal) if r.goal is not None else None,
                    "path": [list(p) for p in r.path] if r.path is not None else None,
                    "eta": r.eta,
                    "v_des": list(r.v_des),
                    "v": list(r.v),
                    "v_prime": list(r.v_prime),
                    "v_star": list(r.v_star),
                    "omega": r.omega,
                    "caps": dict(r.caps),
                    "cap_active": r.cap_active,
                    "w_value": r.w_value,
                    "flags": list(r.flags),
                }
                for k, r in self.robots.items()
            },
            "connections": [
                {
                    "roles": list(c.roles),
                    "robots": list(c.robots) if c.robots is not None else None,
                    "length": c.length,
                    "spring": c.spring,
                    "damping": c.damping,
                    "fresh": c.fresh,
                }
                for c in self.connections
            ],
        }


def _pt(point) -> tuple[float, float]:
    return (float(point[0]), float(point[1]))


def lookahead_point(path: PlannedPath, lookahead: float) -> tuple[np.ndarray, float]:
    """Point ``lookahead`` normalized seconds along a path, with the local
    path direction there. Saturates at the path end."""
    vertices = path.vertices
    if len(vertices) < 2:
        return vertices[0].copy(), 0.0
    target = path.eta - lookahead
    etas = path.etas
    if target <= etas[-1]:
        seg = vertices[-1] - vertices[-2]
        norm = float(np.linalg.norm(seg))
        theta = math.atan2(seg[1], seg[0]) if norm > 0.0 else 0.0
        return vertices[-1].copy(), theta
    for k in range(1, len(vertices)):
        if etas[k] <= target:
            span = etas[k - 1] - etas[k]
            s = (etas[k - 1] - target) / span if span > 0.0 else 1.0
            point = vertices[k - 1] + s * (vertices[k] - vertices[k - 1])
            seg = vertices[k] - vertices[k - 1]
            norm = float(np.linalg.norm(seg))
            theta = math.atan2(seg[1], seg[0]) if norm > 0.0 else 0.0
            return point, theta
    seg = vertices[-1] - vertices[-2]
    theta = math.atan2(seg[1], seg[0])
    return vertices[-1].copy(), theta


def compute_partial_goals(
    leader_path: PlannedPath,
    lookahead: float,
    spec: FormationSpec,
    w_b: VelocityMap,
    w_min_partial: float,
) -> np.ndarray:
    """Per-role reference points: the look-ahead point for the leader role,
    the rotated base configuration for followers, each follower point shifted
    toward the leader point until its cell clears ``w_min_partial``."""
    p1, theta = lookahead_point(leader_path, lookahead)
    rot = rotation_matrix(theta)
    base = spec.base_points
    points = (base - base[0]) @ rot.T + p1
    step = 0.5 * w_b.geometry.cell_size
    for role in range(1, len(points)):
        p = points[role]
        while w_b.value_at_world(p[0], p[1]) < w_min_partial:
            offset = p1 - p
            dist = float(np.linalg.norm(offset))
            if dist <= step:
                p = p1.copy()
                break
            p = p + (step / dist) * offset
        points[role] = p
    return points


def compute_desired_velocity(path: PlannedPath, v_cap: float) -> np.ndarray:
    """Unit initial path direction scaled to the speed cap; zero if converged."""
    direction = path.initial_direction()
    if direction is None:
        return np.zeros(2)
    return direction * v_cap


def spring_delta(conn: ConnectionSpec, length: float) -> float:
    """Signed spring speed delta: negative pushes the pair apart, positive
    pulls together (capped)."""
    stretch = length - conn.rest_length
    if stretch < 0.0:
        return -conn.k_rep * stretch * stretch
    return min(conn.k_att * stretch * stretch, conn.max_att)


def damping_delta(
    conn: ConnectionSpec,
    length: float,
    prev_length: float,
    dt: float,
    fresh: bool,
) -> float:
    """Rate damping on the connection length; omitted for fresh pairings."""
    if fresh:
        return 0.0
    rate = (length - prev_length) / dt
    if rate < 0.0:
        return conn.b_att * rate
    return conn.b_rep * rate


def apply_connections(
    v_des: dict[int, np.ndarray],
    positions: dict[int, np.ndarray],
    spec: FormationSpec,
    assignment: RoleAssignment,
    memory: list[ConnectionMemory],
    dt: float,
) -> tuple[dict[int, np.ndarray], list[ConnectionFrame], list[ConnectionMemory], list[str]]:
    """Add each connection's spring and damping deltas along the inter-robot
    axis. Contributions to a pair are equal-magnitude and opposite."""
    velocities = {k: v.astype(np.float64).copy() for k, v in v_des.items()}
    records: list[ConnectionFrame] = []
    new_memory: list[ConnectionMemory] = []
    events: list[str] = []
    if len(memory) != len(spec.connections):
        memory = [ConnectionMemory() for _ in spec.connections]
    for conn, mem in zip(spec.connections, memory):
        role_a, role_b = conn.roles
        robot_a = assignment.robot_of(role_a)
        robot_b = assignment.robot_of(role_b)
        pair = (min(robot_a, robot_b), max(robot_a, robot_b))
        fresh = mem.pair != pair
        axis = positions[robot_b] - positions[robot_a]
        length = float(np.linalg.norm(axis))
        if length < 1e-9:
            # Coincident robots: deterministic fallback axis, repulsion still acts.
            unit_ab = np.array([1.0, 0.0])
            events.append(f"coincident robots {pair} on connection {conn.roles}")
        else:
            unit_ab = axis / length
        spring = spring_delta(conn, length)
        damping = damping_delta(conn, length, mem.length, dt, fresh)
        total = spring + damping
        velocities[robot_a] += total * unit_ab
        velocities[robot_b] += total * -unit_ab
        records.append(
            ConnectionFrame(
                roles=conn.roles,
                robots=(robot_a, robot_b),
                length=length,
                spring=spring,
                damping=damping,
                fresh=fresh,
            )
        )
        new_memory.append(ConnectionMemory(pair=pair, length=length))
    return velocities, records, new_memory, events


def avoidance_adjust(
    v: np.ndarray,
    grad: np.ndarray,
    w_value: float,
    w_min_avoid: float,
    grad_threshold: float,
) -> tuple[np.ndarray, float | None]:
    """Core obstacle-avoidance projection. Returns the adjusted velocity and
    the adjustment factor, or ``(v, None)`` when not triggered."""
    inward = float(grad @ v)
    if w_value >= 1.0 or inward >= 0.0:
        return v, None
    grad_norm_sq = float(grad @ grad)
    if math.sqrt(grad_norm_sq) <= grad_threshold:
        return v, None
    alpha = (1.0 - w_value) / (1.0 - w_min_avoid)
    alpha = min(max(alpha, 0.0), 1.0)
    v_proj = (inward / grad_norm_sq) * grad
    return v - alpha * v_proj, alpha


def obstacle_avoidance(
    v: np.ndarray,
    cell: tuple[int, int],
    w_b: VelocityMap,
    w_min_avoid: float,
) -> tuple[np.ndarray, float | None]:
    """Cancel part of the velocity component that descends the follower
    velocity map, per the projection rule with the adjustment factor."""
    if not w_b.geometry.in_bounds(*cell):
        raise ValueError(f"robot cell {cell} is out of bounds")
    grad = sobel_gradient(w_b.field, cell)
    w_value = w_b.value_at_cell(*cell)
    threshold = 0.5 / w_b.safe_distance
    return avoidance_adjust(v, grad, w_value, w_min_avoid, threshold)


def directional_speed_limit(theta: float, v_max_x: float, v_max_y: float) -> float:
    """Radius at body-frame angle ``theta`` of the speed-limit ellipse."""
    s = math.sin(theta) * v_max_x
    c = math.cos(theta) * v_max_y
    return (v_max_x * v_max_y) / math.sqrt(s * s + c * c)


def proximity_speed_limit(w_value: float, v_min: float, v_max_x: float) -> float:
    """Linear remap of the velocity-map value from [0, 1] to [v_min, v_max_x]."""
    return v_min + w_value * (v_max_x - v_min)


def goal_speed_limit(dist_to_goal: float, d_slowdown: float, v_max_x: float) -> float:
    """Final-approach slowdown, proportional to the remaining distance."""
    return (dist_to_goal / d_slowdown) * v_max_x


def finalize_command(
    robot: int,
    v_prime: np.ndarray,
    heading: float,
    caps: dict[str, float],
    config: PlannerConfig,
) -> tuple[VelocityCommand, str]:
    """Scale the velocity to the binding cap and align yaw with it."""
    speed = float(np.linalg.norm(v_prime))
    terms = {"v_prime": speed, **caps}
    active = min(terms, key=lambda name: (terms[name], name))
    magnitude = terms[active]
    if speed <= 0.0:
        return VelocityCommand(robot, 0.0, 0.0, 0.0), "v_prime"
    v_star = v_prime * (magnitude / speed)
    v_star_speed = float(np.linalg.norm(v_star))
    if v_star_speed < config.yaw_deadband:
        omega = 0.0
    else:
        error = wrap_angle(math.atan2(v_star[1], v_star[0]) - heading)
        omega = config.yaw_gain * error
        omega = min(max(omega, -config.max_yaw_rate), config.max_yaw_rate)
    return VelocityCommand(robot, float(v_star[0]), float(v_star[1]), omega), active


class FormationPlanner:
    """Stateful planner executing the per-cycle pipeline on a static map."""

    def __init__(self, spec: FormationSpec, config: PlannerConfig, maps: MapBundle):
        self.spec = spec
        self.config = config
        self.maps = maps
        self.state = PlannerState(
            conn_memory=[ConnectionMemory() for _ in spec.connections]
        )
        self.cycle_index = 0
        self._wa_field: ArrivalTimeField | None = None
        self._wb_center_field: ArrivalTimeField | None = None
        self._final_fields: dict[int, ArrivalTimeField | None] = {}
        self._field_cache: OrderedDict[tuple[int, int], ArrivalTimeField] = OrderedDict()

    # -- goal handling -----------------------------------------------------

    def set_formation_goal(self, goal: Pose) -> None:
        """Accept a new formation goal and enter the partial-goal phase.

        A new goal replaces any active one. Arrival fields from the goal
        center are solved once here and reused every cycle.
        """
        geom = self.maps.w_b.geometry
        cell = geom.cell_of_world(goal.x, goal.y)
        if not geom.in_bounds(*cell):
            raise GoalValidationError(f"goal ({goal.x:.3f}, {goal.y:.3f}) is out of bounds")
        if self.maps.w_b.value_at_cell(*cell) <= 0.0:
            raise GoalValidationError(
                f"goal ({goal.x:.3f}, {goal.y:.3f}) is in an inflated obstacle"
            )
        self._wa_field = solve_eikonal(self.maps.w_a.field, [cell])
        self._wb_center_field = solve_eikonal(self.maps.w_b.field, [cell])
        self._final_fields = {}
        state = self.state
        state.formation_goal = goal
        state.final_goals = goal.transform(self.spec.base_points)
        state.phase = Phase.PARTIAL_GOAL
        state.assignment = None  # leadership hysteresis restarts with the new goal
        state.paths = {}

    # -- per-cycle pipeline ------------------------------------------------

    def plan_cycle(self, poses: dict[int, Pose]) -> tuple[dict[int, VelocityCommand], PlannerFrame]:
        state = self.state
        if state.phase is Phase.INACTIVE:
            raise PlannerStateError("planner is inactive; set a formation goal first")
        if len(poses) != self.spec.size:
            raise ValueError(f"expected {self.spec.size} robot poses, got {len(poses)}")
        geom = self.maps.w_b.geometry
        for robot, pose in poses.items():
            if not geom.contains_world(pose.x, pose.y):
                raise ValueError(f"robot {robot} at ({pose.x:.3f}, {pose.y:.3f}) is out of bounds")

        robots = sorted(poses)
        positions = {k: poses[k].xy for k in robots}
        flags: dict[int, list[str]] = {k: [] for k in robots}
        events: list[str] = []
        goals: dict[int, np.ndarray | None] = {k: None for k in robots}
        paths: dict[int, PlannedPath | None] = {k: None for k in robots}

        if state.phase is Phase.PARTIAL_GOAL:
            self._partial_stage(poses, positions, robots, goals, paths, flags, events)
        if state.phase is Phase.FINAL_GOAL:
            self._final_stage(positions, robots, goals, paths, flags, events)

        phase_label = state.phase
        leader = state.assignment.leader_robot if state.assignment else None
        state.paths = paths

        # Desired velocities, with obstacle-recovery fallback.
        v_des: dict[int, np.ndarray] = {}
        for k in robots:
            cell = geom.cell_of_world(*positions[k])
            if self.maps.w_b.value_at_cell(*cell) <= 0.0:
                v_des[k] = self._recovery_velocity(cell)
                flags[k].append("recovering")
            elif paths[k] is None:
                v_des[k] = np.zeros(2)
            else:
                v_des[k] = compute_desired_velocity(paths[k], self.config.v_max_x)

        # Springs and dampers.
        if state.assignment is not None:
            velocities, conn_records, state.conn_memory, conn_events = apply_connections(
                v_des, positions, self.spec, state.assignment, state.conn_memory, self.config.dt
            )
            events.extend(conn_events)
        else:
            velocities = {k: v.copy() for k, v in v_des.items()}
            conn_records = []

        # Obstacle avoidance, caps, yaw.
        commands: dict[int, VelocityCommand] = {}
        robot_frames: dict[int, RobotFrame] = {}
        for k in robots:
            cell = geom.cell_of_world(*positions[k])
            v_prime, _alpha = obstacle_avoidance(
                velocities[k], cell, self.maps.w_b, self.config.w_min_avoid
            )
            w_value = self.maps.w_b.value_at_cell(*cell)
            caps = {
                "theta": self._theta_cap(v_prime, poses[k].heading),
                "w": proximity_speed_limit(w_value, self.config.v_min, self.config.v_max_x),
                "goal": self._goal_cap(positions[k], goals[k], state.phase),
            }
            command, active = finalize_command(k, v_prime, poses[k].heading, caps, self.config)
            commands[k] = command
            robot_frames[k] = RobotFrame(
                robot=k,
                goal=_pt(goals[k]) if goals[k] is not None else None,
                path=[_pt(p) for p in paths[k].vertices] if paths[k] is not None else None,
                eta=paths[k].eta if paths[k] is not None else None,
                v_des=_pt(v_des[k]),
                v=_pt(velocities[k]),
                v_prime=_pt(v_prime),
                v_star=(command.vx, command.vy),
                omega=command.omega,
                caps={name: float(value) for name, value in caps.items()},
                cap_active=active,
                w_value=float(w_value),
                flags=flags[k],
            )

        # Final-goal convergence check.
        converged = False
        if state.phase is Phase.FINAL_GOAL and all(
            goals[k] is not None
            and float(np.linalg.norm(positions[k] - goals[k])) <= self.config.goal_tolerance
            for k in robots
        ):
            converged = True
            events.append("all robots reached their final goals")
            state.phase = Phase.INACTIVE
            state.formation_goal = None

        frame = PlannerFrame(
            cycle=self.cycle_index,
            time=self.cycle_index * self.config.dt,
            phase=phase_label.value,
            leader=leader,
            converged=converged,
            robots=robot_frames,
            connections=conn_records,
            events=events,
        )
        self.cycle_index += 1
        return commands, frame

    # -- stages --------------------------------------------------------------

    def _partial_stage(self, poses, positions, robots, goals, paths, flags, events):
        state = self.state
        goal = state.formation_goal
        etas = {k: self._wa_field.value_at(*positions[k]) for k in robots}
        current = state.assignment.leader_robot if state.assignment else None
        try:
            leader = select_leader(etas, current, self.config.d_switch)
        except LeaderSelectionError:
            events.append("no robot has a route to the formation goal")
            for k in robots:
                flags[k].append("no_route")
            return
        if current is not None and leader != current:
            events.append(f"leadership switched from {current} to {leader}")

        try:
            leader_path = extract_path(
                self._wa_field, positions[leader], np.array([goal.x, goal.y])
            )
        except (UnreachableGoalError, DescentError) as exc:
            events.append(f"leader path extraction failed: {exc}")
            for k in robots:
                flags[k].append("no_route")
            return

        if leader_path.eta < self.config.lookahead:
            events.append("leader within look-ahead of the goal; entering final-goal phase")
            state.phase = Phase.FINAL_GOAL
            return

        p1, theta = lookahead_point(leader_path, self.config.lookahead)
        state.assignment = assign_follower_roles(self.spec, leader, positions, theta)
        partial = compute_partial_goals(
            leader_path, self.config.lookahead, self.spec, self.maps.w_b,
            self.config.w_min_partial,
        )
        for k in robots:
            role = state.assignment.role_of(k)
            goals[k] = partial[role]
            if k == leader:
                paths[k] = leader_path
                continue
            paths[k] = self._plan_local(positions[k], partial[role], flags[k])

    def _final_stage(self, positions, robots, goals, paths, flags, events):
        state = self.state
        state.assignment = assign_final_goals(positions, state.final_goals)
        for k in robots:
            role = state.assignment.role_of(k)
            target = state.final_goals[role]
            goals[k] = target
            arrival = self._final_field(role)
            if arrival is None:
                flags[k].append("no_path")
                continue
            try:
                paths[k] = extract_path(arrival, positions[k], target)
            except (UnreachableGoalError, DescentError):
                flags[k].append("no_path")

    # -- helpers ---------------------------------------------------------------

    def _plan_local(self, start: np.ndarray, target: np.ndarray, robot_flags: list[str]):
        geom = self.maps.w_b.geometry
        cell = geom.cell_of_world(target[0], target[1])
        if not geom.in_bounds(*cell) or self.maps.w_b.value_at_cell(*cell) <= 0.0:
            robot_flags.append("no_path")
            return None
        arrival = self._field_for_cell(cell)
        try:
            return extract_path(arrival, start, target)
        except (UnreachableGoalError, DescentError):
            robot_flags.append("no_path")
            return None

    def _field_for_cell(self, cell: tuple[int, int]) -> ArrivalTimeField:
        cached = self._field_cache.get(cell)
        if cached is not None:
            self._field_cache.move_to_end(cell)
            return cached
        arrival = solve_eikonal(self.maps.w_b.field, [cell])
        self._field_cache[cell] = arrival
        if len(self._field_cache) > _FIELD_CACHE_SIZE:
            self._field_cache.popitem(last=False)
        return arrival

    def _final_field(self, role: int) -> ArrivalTimeField | None:
        if role not in self._final_fields:
            target = self.state.final_goals[role]
            geom = self.maps.w_b.geometry
            cell = geom.cell_of_world(target[0], target[1])
            if not geom.in_bounds(*cell) or self.maps.w_b.value_at_cell(*cell) <= 0.0:
                self._final_fields[role] = None
            else:
                self._final_fields[role] = self._field_for_cell(cell)
        return self._final_fields[role]

    def _recovery_velocity(self, cell: tuple[int, int]) -> np.ndarray:
        """Climb the inflated-map distance field until the robot is clear."""
        grad = sobel_gradient(self.maps.inflated_distance.field, cell)
        norm = float(np.linalg.norm(grad))
        if norm < 1e-12:
            return np.zeros(2)
        return (grad / norm) * self.config.v_max_x

    def _theta_cap(self, v_prime: np.ndarray, heading: float) -> float:
        if float(np.linalg.norm(v_prime)) <= 0.0:
            return self.config.v_max_x
        theta = wrap_angle(math.atan2(v_prime[1], v_prime[0]) - heading)
        return directional_speed_limit(theta, self.config.v_max_x, self.config.v_max_y)

    def _goal_cap(self, position: np.ndarray, goal: np.ndarray | None, phase: Phase) -> float:
        if phase is not Phase.FINAL_GOAL or goal is None:
            return math.inf
        dist = float(np.linalg.norm(position - goal))
        return goal_speed_limit(dist, self.config.d_slowdown, self.config.v_max_x)
