"""Bundled experiment scenarios and the scenario file format.

A scenario file is a YAML document (``schema_version: 1``) naming a map
image + metadata pair, the formation base points and connections (roles are
1-based in the file), planner-config overrides, initial robot poses, a goal
schedule, and expected-metrics thresholds. Map paths are relative to the
scenario file.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from ..formation import ConnectionSpec, FormationSpec
from ..geometry import Pose
from ..grid import load_map
from ..planner import PlannerConfig
from ..simulator import DEFAULT_LAG_TAU, GoalTrigger, Scenario

_DATA_DIR = Path(__file__).parent / "data"
_CONNECTION_KEYS = ("rest_length", "k_rep", "k_att", "max_att", "b_att", "b_rep")


class ScenarioFormatError(Exception):
    """A scenario file failed schema validation; carries the field path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


def _require(mapping: dict, key: str, context: str):
    if not isinstance(mapping, dict) or key not in mapping:
        raise ScenarioFormatError(f"{context}.{key}", "missing required field")
    return mapping[key]


def _number(value, context: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioFormatError(context, f"expected a number, got {value!r}")
    return float(value)


def _point(value, context: str, size: int) -> list[float]:
    if not isinstance(value, (list, tuple)) or len(value) != size:
        raise ScenarioFormatError(context, f"expected a list of {size} numbers, got {value!r}")
    return [_number(v, f"{context}[{idx}]") for idx, v in enumerate(value)]


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file, loading its map."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ScenarioFormatError("file", f"scenario file not found: {path}")
    except yaml.YAMLError as exc:
        raise ScenarioFormatError("file", f"not valid YAML: {exc}")
    if not isinstance(raw, dict):
        raise ScenarioFormatError("file", "scenario document must be a mapping")
    version = raw.get("schema_version")
    if version != 1:
        raise ScenarioFormatError("schema_version", f"unsupported version {version!r}")

    name = str(raw.get("name", path.stem))

    map_section = _require(raw, "map", "scenario")
    image = path.parent / str(_require(map_section, "image", "scenario.map"))
    meta = path.parent / str(_require(map_section, "meta", "scenario.map"))
    try:
        grid = load_map(image, meta)
    except Exception as exc:
        raise ScenarioFormatError("scenario.map", str(exc))

    formation_section = _require(raw, "formation", "scenario")
    points_raw = _require(formation_section, "base_points", "scenario.formation")
    if not isinstance(points_raw, list) or len(points_raw) < 2:
        raise ScenarioFormatError("scenario.formation.base_points", "need at least two points")
    base_points = np.array(
        [_point(p, f"scenario.formation.base_points[{i}]", 2) for i, p in enumerate(points_raw)]
    )
    connections = []
    for idx, conn_raw in enumerate(formation_section.get("connections", [])):
        ctx = f"scenario.formation.connections[{idx}]"
        roles = _point(_require(conn_raw, "roles", ctx), f"{ctx}.roles", 2)
        role_a, role_b = int(roles[0]), int(roles[1])
        if not (1 <= role_a <= len(points_raw) and 1 <= role_b <= len(points_raw)):
            raise ScenarioFormatError(f"{ctx}.roles", f"roles must be in 1..{len(points_raw)}")
        params = {
            key: _number(_require(conn_raw, key, ctx), f"{ctx}.{key}")
            for key in _CONNECTION_KEYS
        }
        try:
            connections.append(ConnectionSpec(roles=(role_a - 1, role_b - 1), **params))
        except ValueError as exc:
            raise ScenarioFormatError(ctx, str(exc))
    try:
        formation = FormationSpec(base_points=base_points, connections=connections)
    except ValueError as exc:
        raise ScenarioFormatError("scenario.formation", str(exc))

    planner_section = raw.get("planner", {})
    if not isinstance(planner_section, dict):
        raise ScenarioFormatError("scenario.planner", "must be a mapping")
    known = set(PlannerConfig.__dataclass_fields__)
    for key in planner_section:
        if key not in known:
            raise ScenarioFormatError(f"scenario.planner.{key}", "unknown planner parameter")
    try:
        config = PlannerConfig(**{k: _number(v, f"scenario.planner.{k}") for k, v in planner_section.items()})
    except ValueError as exc:
        raise ScenarioFormatError("scenario.planner", str(exc))

    robots_raw = _require(raw, "robots", "scenario")
    if not isinstance(robots_raw, list) or not robots_raw:
        raise ScenarioFormatError("scenario.robots", "need at least one initial pose")
    initial_poses = [
        Pose(*_point(p, f"scenario.robots[{i}]", 3)) for i, p in enumerate(robots_raw)
    ]

    schedule_raw = _require(raw, "schedule", "scenario")
    if not isinstance(schedule_raw, list) or not schedule_raw:
        raise ScenarioFormatError("scenario.schedule", "schedule must not be empty")
    schedule = []
    for idx, entry in enumerate(schedule_raw):
        ctx = f"scenario.schedule[{idx}]"
        goal = Pose(*_point(_require(entry, "goal", ctx), f"{ctx}.goal", 3))
        has_at = isinstance(entry, dict) and "at" in entry
        on_idle = bool(entry.get("on_idle", False)) if isinstance(entry, dict) else False
        if has_at == on_idle:
            raise ScenarioFormatError(ctx, "exactly one of 'at' or 'on_idle: true' is required")
        schedule.append(
            GoalTrigger(
                goal=goal,
                at=_number(entry["at"], f"{ctx}.at") if has_at else None,
                on_idle=on_idle,
            )
        )

    duration_cap = _number(_require(raw, "duration_cap", "scenario"), "scenario.duration_cap")
    lag_tau = _number(raw.get("lag_tau", DEFAULT_LAG_TAU), "scenario.lag_tau")
    seed = int(raw.get("seed", 0))
    thresholds = raw.get("thresholds", {})
    if not isinstance(thresholds, dict):
        raise ScenarioFormatError("scenario.thresholds", "must be a mapping")

    try:
        return Scenario(
            name=name,
            grid=grid,
            formation=formation,
            config=config,
            initial_poses=initial_poses,
            schedule=schedule,
            duration_cap=duration_cap,
            lag_tau=lag_tau,
            seed=seed,
            thresholds=dict(thresholds),
        )
    except ValueError as exc:
        raise ScenarioFormatError("scenario", str(exc))


@dataclass(frozen=True)
class ScenarioBundle:
    """A shipped scenario: file paths plus its expected-metrics thresholds."""

    name: str
    scenario_path: Path
    map_image: Path
    map_meta: Path
    thresholds: dict

    def load(self) -> Scenario:
        return load_scenario(self.scenario_path)


def builtin_scenarios() -> list[ScenarioBundle]:
    """The shipped experiment families, in stable name order."""
    bundles = []
    for scenario_path in sorted(_DATA_DIR.glob("*.yaml")):
        raw = yaml.safe_load(scenario_path.read_text(encoding="utf-8"))
        bundles.append(
            ScenarioBundle(
                name=str(raw.get("name", scenario_path.stem)),
                scenario_path=scenario_path,
                map_image=scenario_path.parent / raw["map"]["image"],
                map_meta=scenario_path.parent / raw["map"]["meta"],
                thresholds=dict(raw.get("thresholds", {})),
            )
        )
    return bundles


def find_scenario(name: str) -> ScenarioBundle:
    """Look up a builtin bundle by name."""
    for bundle in builtin_scenarios():
        if bundle.name == name:
            return bundle
    known = ", ".join(b.name for b in builtin_scenarios())
    raise KeyError(f"unknown builtin scenario {name!r}; known: {known}")
