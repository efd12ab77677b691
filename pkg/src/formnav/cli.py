"""Batch entry point: run scenarios, inspect planning fields, serve telemetry.

Exit codes: 0 success, 1 scenario thresholds violated, 2 invalid input.
Set FORMNAV_LOG=debug|info|warning to control verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("formnav")


def _parse_point(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected X,Y, got {text!r}")
    try:
        return (float(parts[0]), float(parts[1]))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected numbers, got {text!r}")


def _resolve_scenario(ref: str):
    """A scenario reference is a file path or a builtin name."""
    from .scenarios import find_scenario, load_scenario

    path = Path(ref)
    if path.exists():
        return load_scenario(path)
    try:
        bundle = find_scenario(ref)
    except KeyError as exc:
        raise SystemExit(f"error: {exc}") from exc
    return bundle.load()


def cmd_run(args) -> int:
    from .scenarios import ScenarioFormatError
    from .simulator import ScenarioRunError, run_scenario

    try:
        scenario = _resolve_scenario(args.scenario)
    except ScenarioFormatError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2

    out_dir = Path(args.out) if args.out else Path(f"runs/{scenario.name}")
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = run_scenario(
            scenario, until_cycle=args.until_cycle, lag_tau=args.lag
        )
    except ScenarioRunError as exc:
        print(f"run error: {exc}", file=sys.stderr)
        return 2

    (out_dir / "metrics.csv").write_text(result.metrics.to_csv(), encoding="utf-8")
    with open(out_dir / "frames.ndjson", "w", encoding="utf-8") as fh:
        for frame in result.frames:
            fh.write(json.dumps(frame.to_dict(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")
    summary = result.summary
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    print(f"scenario: {summary['scenario']}")
    print(f"status: {summary['status']} after {summary['cycles']} cycles")
    if summary["completion_time"] is not None:
        print(f"completion time: {summary['completion_time']:.2f} s")
    if summary["min_obstacle_clearance"] is not None:
        print(f"min obstacle clearance: {summary['min_obstacle_clearance']:.3f} m")
    if summary["min_pairwise_distance"] is not None:
        print(f"min inter-robot distance: {summary['min_pairwise_distance']:.3f} m")
    print(f"leader switches: {summary['leader_switches']}")
    print(f"phases: {' -> '.join(p for _, p in summary['phase_timeline'])}")
    for name, verdict in summary["thresholds"].items():
        print(f"threshold {name}: {'ok' if verdict['ok'] else 'VIOLATED'} ({verdict})")
    print(f"outputs: {out_dir}")

    if args.until_cycle is not None:
        return 0
    return 0 if summary["thresholds_met"] else 1


def cmd_plan(args) -> int:
    from .fast_marching import (
        UnreachableGoalError,
        build_velocity_map,
        distance_field,
        solve_eikonal,
        extract_path,
    )
    from .grid import MapError, inflate, load_map

    meta = Path(args.meta) if args.meta else Path(args.map).with_suffix(".yaml")
    try:
        grid = load_map(args.map, meta)
    except MapError as exc:
        print(f"map error: {exc}", file=sys.stderr)
        return 2

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    inflated = inflate(grid, args.inflate)
    dist = distance_field(inflated)
    vmap = build_velocity_map(inflated, args.safe_dist)
    goal_cell = grid.geometry.cell_of_world(*args.goal)
    if not grid.geometry.in_bounds(*goal_cell) or vmap.value_at_cell(*goal_cell) <= 0.0:
        print("plan error: goal lies in or beyond the inflated map", file=sys.stderr)
        return 2
    arrival = solve_eikonal(vmap.field, [goal_cell])
    try:
        path = extract_path(arrival, np.asarray(args.start), np.asarray(args.goal))
    except UnreachableGoalError as exc:
        print(f"plan error: {exc}", file=sys.stderr)
        return 2

    np.save(out_dir / "grid.npy", grid.cells)
    np.save(out_dir / "inflated.npy", inflated.cells)
    np.save(out_dir / "distance.npy", dist.field.values)
    np.save(out_dir / "velocity.npy", vmap.field.values)
    np.save(out_dir / "arrival.npy", arrival.field.values)
    lines = ["x,y,eta"]
    lines += [
        f"{repr(float(v[0]))},{repr(float(v[1]))},{repr(float(e))}"
        for v, e in zip(path.vertices, path.etas)
    ]
    (out_dir / "path.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"path: {len(path)} vertices, eta {path.eta:.3f} s")
    print(f"outputs: {out_dir} (grid, inflated, distance, velocity, arrival, path)")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .scenarios import ScenarioFormatError
    from .server import SimulationSession, create_app

    try:
        scenario = _resolve_scenario(args.scenario)
    except ScenarioFormatError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    session = SimulationSession(scenario, realtime=not args.no_realtime)
    app = create_app(session)
    log.info("serving %s on %s:%d (paused; connect a client to drive it)",
             scenario.name, args.host, args.port)
    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    except OSError as exc:
        print(f"serve error: {exc}", file=sys.stderr)
        return 2
    return 0


def cmd_validate(args) -> int:
    from .scenarios import ScenarioFormatError, load_scenario

    try:
        scenario = load_scenario(args.scenario)
    except ScenarioFormatError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 2
    print(
        f"ok: {scenario.name} ({scenario.formation.size} robots, "
        f"{len(scenario.formation.connections)} connections, "
        f"{scenario.grid.geometry.width}x{scenario.grid.geometry.height} cells)"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="formnav",
        description="Formation path planning, simulation, and live telemetry.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write metrics")
    run.add_argument("scenario", help="builtin name or scenario file path")
    run.add_argument("--out", help="output directory (default runs/<name>)")
    run.add_argument("--until-cycle", type=int, default=None, help="stop after N cycles")
    run.add_argument("--lag", type=float, default=None, help="override velocity lag tau (s)")
    run.set_defaults(func=cmd_run)

    plan = sub.add_parser("plan", help="plan a single path and export the fields")
    plan.add_argument("map", help="map image path")
    plan.add_argument("--meta", help="map metadata path (default: <map>.yaml)")
    plan.add_argument("--start", type=_parse_point, required=True)
    plan.add_argument("--goal", type=_parse_point, required=True)
    plan.add_argument("--safe-dist", type=float, required=True)
    plan.add_argument("--inflate", type=float, default=0.30)
    plan.add_argument("--out", default="plan_out")
    plan.set_defaults(func=cmd_plan)

    serve = sub.add_parser("serve", help="serve the live telemetry API for a scenario")
    serve.add_argument("scenario")
    serve.add_argument("--port", type=int, default=8720)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--no-realtime", action="store_true",
                       help="run cycles as fast as possible (for tests)")
    serve.set_defaults(func=cmd_serve)

    validate = sub.add_parser("validate", help="schema-check a scenario file")
    validate.add_argument("scenario")
    validate.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("FORMNAV_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO))
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
