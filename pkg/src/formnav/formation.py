"""Formation geometry, virtual-connection definitions, and role assignment.

Roles are 0-based indices into the base configuration; role 0 is the leader
position, which by convention sits on the formation frame's positive x-axis.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import wrap_angle

_AXIS_TOLERANCE = 1e-9
_DISTANCE_RANK_TOLERANCE = 1e-6


class LeaderSelectionError(Exception):
    """Raised when no robot has a finite route to the goal."""


@dataclass(frozen=True)
class ConnectionSpec:
    """Virtual spring-damper parameters for one pair of formation roles."""

    roles: tuple[int, int]
    rest_length: float
    k_rep: float  # 1/(m s)
    k_att: float  # 1/(m s)
    max_att: float  # m/s, cap on the attractive velocity delta
    b_att: float  # dimensionless, damping while closing
    b_rep: float  # dimensionless, damping while separating

    def __post_init__(self):
        a, b = self.roles
        if a == b:
            raise ValueError(f"connection must link two distinct roles, got {self.roles}")
        for name in ("rest_length", "k_rep", "k_att", "max_att", "b_att", "b_rep"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"connection {name} must be positive, got {getattr(self, name)}")
        if self.k_att > self.k_rep:
            warnings.warn(
                f"connection {self.roles}: k_att {self.k_att} exceeds k_rep {self.k_rep}; "
                "attraction is typically chosen lower",
                stacklevel=3,
            )


@dataclass
class FormationSpec:
    """Base configuration points plus the connection set."""

    base_points: np.ndarray  # (N, 2), formation frame, row 0 = leader
    connections: list[ConnectionSpec] = field(default_factory=list)

    def __post_init__(self):
        points = np.asarray(self.base_points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 2:
            raise ValueError(f"base_points must be (N>=2, 2), got shape {points.shape}")
        if not (points[0, 0] > 0.0 and abs(points[0, 1]) <= _AXIS_TOLERANCE):
            raise ValueError(
                f"leader point {tuple(points[0])} must lie on the positive x-axis"
            )
        self.base_points = points
        n = points.shape[0]
        seen = set()
        for conn in self.connections:
            a, b = conn.roles
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"connection roles {conn.roles} out of range for {n} roles")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise ValueError(f"duplicate connection for role pair {key}")
            seen.add(key)

    @property
    def size(self) -> int:
        return self.base_points.shape[0]

    def follower_roles(self) -> list[int]:
        return list(range(1, self.size))

    def role_distances(self) -> np.ndarray:
        """Distance of each role from the leader role."""
        return np.linalg.norm(self.base_points - self.base_points[0], axis=1)


@dataclass
class RoleAssignment:
    """Bijection between robot ids and formation roles."""

    mapping: dict[int, int]  # robot id -> role index
    leader_robot: int | None = None

    def __post_init__(self):
        roles = sorted(self.mapping.values())
        if roles != list(range(len(self.mapping))):
            raise ValueError(f"mapping must be a bijection onto 0..N-1, got roles {roles}")
        if self.leader_robot is not None:
            if self.mapping.get(self.leader_robot) != 0:
                raise ValueError(
                    f"leader robot {self.leader_robot} must hold role 0, "
                    f"got {self.mapping.get(self.leader_robot)}"
                )

    def role_of(self, robot: int) -> int:
        return self.mapping[robot]

    def robot_of(self, role: int) -> int:
        for robot, r in self.mapping.items():
            if r == role:
                return robot
        raise KeyError(role)


def select_leader(
    etas: dict[int, float],
    current_leader: int | None,
    d_switch: float,
) -> int:
    """Pick the leader: fastest route wins, but a challenger must beat the
    incumbent by more than ``d_switch`` normalized seconds."""
    finite = {k: v for k, v in etas.items() if math.isfinite(v)}
    if not finite:
        raise LeaderSelectionError("no robot has a finite route to the goal")
    best = min(finite, key=lambda k: (finite[k], k))
    if current_leader is None or not math.isfinite(etas.get(current_leader, math.inf)):
        return best
    if finite[best] < etas[current_leader] - d_switch:
        return best
    return current_leader


def _cyclic_angular_match(
    robots: list[int],
    robot_bearings: dict[int, float],
    roles: list[int],
    role_bearings: dict[int, float],
) -> dict[int, int]:
    """Match robots to roles preserving cyclic angular order.

    Both lists are sorted by bearing; the cyclic shift with the smallest total
    angular mismatch wins, ties broken by the smaller shift.
    """
    robots_sorted = sorted(robots, key=lambda k: (robot_bearings[k], k))
    roles_sorted = sorted(roles, key=lambda r: (role_bearings[r], r))
    m = len(robots_sorted)
    best_shift = 0
    best_cost = math.inf
    for shift in range(m):
        cost = 0.0
        for idx in range(m):
            beta = robot_bearings[robots_sorted[idx]]
            gamma = role_bearings[roles_sorted[(idx + shift) % m]]
            cost += abs(wrap_angle(beta - gamma))
        if cost < best_cost - 1e-12:
            best_cost = cost
            best_shift = shift
    return {
        robots_sorted[idx]: roles_sorted[(idx + best_shift) % m]
        for idx in range(m)
    }


def _distance_rank_match(
    followers: list[int],
    distances: dict[int, float],
    roles: list[int],
    role_distances: np.ndarray,
) -> dict[int, int]:
    robots_sorted = sorted(followers, key=lambda k: (distances[k], k))
    roles_sorted = sorted(roles, key=lambda r: (role_distances[r], r))
    return dict(zip(robots_sorted, roles_sorted))


def assign_follower_roles(
    spec: FormationSpec,
    leader: int,
    poses: dict[int, np.ndarray],
    leader_heading: float,
) -> RoleAssignment:
    """Assign follower roles so the angular order about the leader matches the
    base configuration's angular order about the leader role.

    Bearings are measured in the leader-heading frame. When the base
    configuration places followers at more than one distance from the leader
    role (and the formation has more than three robots), robots are first
    grouped by distance rank and the angular matching runs within each group.
    """
    if leader not in poses:
        raise ValueError(f"leader {leader} is not among the posed robots")
    if len(poses) != spec.size:
        raise ValueError(f"expected {spec.size} robots, got {len(poses)}")
    followers = sorted(k for k in poses if k != leader)
    leader_pos = np.asarray(poses[leader], dtype=np.float64)[:2]

    offsets = {k: np.asarray(poses[k], dtype=np.float64)[:2] - leader_pos for k in followers}
    distances = {k: float(np.linalg.norm(v)) for k, v in offsets.items()}

    if any(d < _AXIS_TOLERANCE for d in distances.values()):
        # Bearing undefined for a robot sitting on the leader.
        mapping = _distance_rank_match(
            followers, distances, spec.follower_roles(), spec.role_distances()
        )
    else:
        robot_bearings = {
            k: wrap_angle(math.atan2(v[1], v[0]) - leader_heading) for k, v in offsets.items()
        }
        base = spec.base_points
        rel = base[1:] - base[0]
        role_bearings = {
            role: math.atan2(rel[role - 1, 1], rel[role - 1, 0])
            for role in spec.follower_roles()
        }
        role_dist = spec.role_distances()
        distinct = np.unique(np.round(role_dist[1:] / _DISTANCE_RANK_TOLERANCE).astype(np.int64))
        if spec.size > 3 and len(distinct) > 1:
            # Group roles by base-configuration distance rank, robots by
            # current distance rank, then match angularly within groups.
            role_groups: list[list[int]] = []
            for key in sorted(distinct):
                group = [
                    r
                    for r in spec.follower_roles()
                    if round(role_dist[r] / _DISTANCE_RANK_TOLERANCE) == key
                ]
                role_groups.append(group)
            robots_by_distance = sorted(followers, key=lambda k: (distances[k], k))
            mapping = {}
            cursor = 0
            for group in role_groups:
                chunk = robots_by_distance[cursor : cursor + len(group)]
                cursor += len(group)
                mapping.update(
                    _cyclic_angular_match(chunk, robot_bearings, group, role_bearings)
                )
        else:
            mapping = _cyclic_angular_match(
                followers, robot_bearings, spec.follower_roles(), role_bearings
            )

    mapping[leader] = 0
    return RoleAssignment(mapping=mapping, leader_robot=leader)


def assign_final_goals(
    poses: dict[int, np.ndarray],
    goals: np.ndarray,
) -> RoleAssignment:
    """Exact minimizer of the summed squared robot-to-goal distances.

    Formations are small, so the optimum is found by enumerating
    permutations; ties break on lexicographic robot order.
    """
    robots = sorted(poses)
    n = len(robots)
    goals = np.asarray(goals, dtype=np.float64)
    if goals.shape != (n, 2):
        raise ValueError(f"expected {n} goals of dimension 2, got shape {goals.shape}")
    if n > 8:
        raise ValueError(f"exhaustive goal assignment supports at most 8 robots, got {n}")
    positions = np.asarray([np.asarray(poses[k], dtype=np.float64)[:2] for k in robots])
    cost = ((positions[:, None, :] - goals[None, :, :]) ** 2).sum(axis=2)
    best_perm = None
    best_cost = math.inf
    for perm in itertools.permutations(range(n)):
        total = sum(cost[idx, perm[idx]] for idx in range(n))
        if total < best_cost:
            best_cost = total
            best_perm = perm
    mapping = {robots[idx]: best_perm[idx] for idx in range(n)}
    return RoleAssignment(mapping=mapping, leader_robot=None)
