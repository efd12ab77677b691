"""Live telemetry: stream planner frames to clients, accept operator goals.

Transport: HTTP for the one-shot map fetch (`GET /map`) and the recorded
trace (`GET /trace`), a WebSocket (`/stream`) for the bidirectional message
stream. Every message is a JSON object with a ``version`` field; framing is
provided by the WebSocket layer. Slow clients lose frames (each client holds
only the latest frame), but cycle indices they do see are strictly
increasing, and the simulation loop never blocks on a client.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
from dataclasses import dataclass, field

from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .geometry import Pose
from .planner import GoalValidationError, PlannerFrame
from .simulator import Scenario, SimulationCore

PROTOCOL_VERSION = 1
MAX_PATH_POINTS = 200

log = logging.getLogger("formnav.server")


def map_digest(core: SimulationCore) -> str:
    geom = core.scenario.grid.geometry
    hasher = hashlib.sha256()
    hasher.update(
        f"{geom.width},{geom.height},{geom.cell_size},{geom.origin}".encode("ascii")
    )
    hasher.update(core.scenario.grid.cells.tobytes())
    return hasher.hexdigest()[:16]


def map_payload(core: SimulationCore) -> dict:
    """Occupancy grid + geometry; rows[j][i] is '#' for occupied, '.' free."""
    grid = core.scenario.grid
    geom = grid.geometry
    rows = [
        "".join("#" if grid.cells[i, j] else "." for i in range(geom.width))
        for j in range(geom.height)
    ]
    return {
        "version": PROTOCOL_VERSION,
        "digest": map_digest(core),
        "geometry": {
            "width": geom.width,
            "height": geom.height,
            "cell_size": geom.cell_size,
            "origin": list(geom.origin),
        },
        "inflation_radius": core.config.inflation_radius,
        "rows": rows,
    }


def decimate(points: list, limit: int = MAX_PATH_POINTS) -> list:
    if points is None or len(points) <= limit:
        return points
    stride = -(-len(points) // limit)
    kept = points[::stride]
    if kept[-1] != points[-1]:
        kept.append(points[-1])
    return kept


def wire_frame(core: SimulationCore, frame: PlannerFrame | None, digest: str) -> dict:
    """One cycle's state for clients: poses always, planner detail when active."""
    robots = {}
    for rid, state in core.states.items():
        entry = {
            "pose": [state.pose.x, state.pose.y, state.pose.heading],
            "velocity": [float(state.velocity[0]), float(state.velocity[1])],
            "goal": None,
            "path": None,
            "eta": None,
            "flags": [],
        }
        if frame is not None and rid in frame.robots:
            rf = frame.robots[rid]
            entry.update(
                goal=list(rf.goal) if rf.goal is not None else None,
                path=[list(p) for p in decimate(rf.path)] if rf.path is not None else None,
                eta=rf.eta,
                flags=list(rf.flags),
            )
        robots[str(rid)] = entry
    connections = []
    if frame is not None:
        connections = [
            {
                "roles": list(c.roles),
                "robots": list(c.robots) if c.robots is not None else None,
                "length": c.length,
                "spring": c.spring,
                "damping": c.damping,
            }
            for c in frame.connections
        ]
    return {
        "type": "frame",
        "version": PROTOCOL_VERSION,
        "cycle": core.cycle,
        "time": core.time,
        "phase": frame.phase if frame is not None else "inactive",
        "leader": frame.leader if frame is not None else None,
        "converged": frame.converged if frame is not None else False,
        "events": list(frame.events) if frame is not None else [],
        "map_digest": digest,
        "robots": robots,
        "connections": connections,
    }


@dataclass(eq=False)
class _Client:
    """Latest-frame mailbox; overwrites drop frames for slow readers."""

    event: asyncio.Event = field(default_factory=asyncio.Event)
    latest: dict | None = None

    def offer(self, frame: dict) -> None:
        self.latest = frame
        self.event.set()


class SimulationSession:
    """Single-writer simulation loop plus the client registry.

    The loop task owns all planner and robot state; WebSocket handlers talk
    to it only through the goal queue and the per-client mailboxes. The
    session starts paused.
    """

    def __init__(self, scenario: Scenario, *, realtime: bool = True):
        self.scenario = scenario
        self.realtime = realtime
        self.core = SimulationCore(scenario)
        self.digest = map_digest(self.core)
        self.paused = True
        self.goal_queue: list[tuple[Pose, _Client | None, object]] = []
        self.clients: set[_Client] = set()
        self._step_once = False
        self._stop = False
        self._wake = asyncio.Event()

    # -- client-facing operations (called from handler tasks) ---------------

    def submit_goal(self, goal: Pose, client: _Client | None, request_id) -> dict:
        """Validate now, queue for the next cycle, return the ack/reject."""
        geom = self.core.bundle.w_b.geometry
        cell = geom.cell_of_world(goal.x, goal.y)
        if not geom.in_bounds(*cell):
            return self._reject(request_id, "goal out of bounds")
        if self.core.bundle.w_b.value_at_cell(*cell) <= 0.0:
            return self._reject(request_id, "goal in inflated obstacle")
        self.goal_queue.append((goal, client, request_id))
        self._wake.set()
        return {
            "type": "ack",
            "version": PROTOCOL_VERSION,
            "request_id": request_id,
            "cycle": self.core.cycle,
        }

    @staticmethod
    def _reject(request_id, reason: str) -> dict:
        return {
            "type": "reject",
            "version": PROTOCOL_VERSION,
            "request_id": request_id,
            "reason": reason,
        }

    def set_paused(self, paused: bool) -> None:
        self.paused = paused
        self._wake.set()

    def request_step(self) -> None:
        self._step_once = True
        self._wake.set()

    def reset(self) -> None:
        self.core = SimulationCore(self.scenario)
        self.goal_queue.clear()
        self.paused = True
        self._wake.set()

    def status(self) -> dict:
        return {
            "type": "status",
            "version": PROTOCOL_VERSION,
            "paused": self.paused,
            "cycle": self.core.cycle,
            "phase": self.core.planner.state.phase.value,
        }

    def planner_trace(self) -> list[dict]:
        return [frame.to_dict() for frame in self.core.frames]

    # -- the loop ------------------------------------------------------------

    async def run_loop(self) -> None:
        dt = self.core.config.dt
        loop = asyncio.get_running_loop()
        next_tick = loop.time()
        while not self._stop:
            idle = (
                not self.core.active and not self.goal_queue and not self.realtime
            )
            if (self.paused and not self._step_once) or (idle and not self._step_once):
                # Paused, or nothing to simulate in fast mode: wait for input.
                self._wake.clear()
                try:
                    await asyncio.wait_for(self._wake.wait(), timeout=0.25)
                except asyncio.TimeoutError:
                    pass
                next_tick = loop.time()
                continue
            self._step_once = False
            while self.goal_queue:
                goal, _client, _request_id = self.goal_queue.pop(0)
                try:
                    self.core.submit_goal(goal)
                except GoalValidationError as exc:  # racing reset, stale queue
                    log.warning("queued goal dropped: %s", exc)
            frame = self.core.run_cycle()
            wire = wire_frame(self.core, frame, self.digest)
            for client in self.clients:
                client.offer(wire)
            if self.realtime:
                next_tick += dt
                delay = next_tick - loop.time()
                if delay > 0:
                    await asyncio.sleep(delay)
                else:
                    next_tick = loop.time()
            else:
                await asyncio.sleep(0)

    def stop(self) -> None:
        self._stop = True
        self._wake.set()


def create_app(session: SimulationSession) -> FastAPI:
    app = FastAPI(title="formnav telemetry", version=str(PROTOCOL_VERSION))
    app.state.session = session

    @app.on_event("startup")
    async def _start() -> None:
        app.state.loop_task = asyncio.create_task(session.run_loop())

    @app.on_event("shutdown")
    async def _shutdown() -> None:
        session.stop()
        task = getattr(app.state, "loop_task", None)
        if task is not None:
            task.cancel()

    @app.get("/map")
    async def get_map() -> dict:
        return map_payload(session.core)

    @app.get("/trace")
    async def get_trace() -> list:
        return session.planner_trace()

    @app.websocket("/stream")
    async def stream(ws: WebSocket) -> None:
        await ws.accept()
        client = _Client()
        send_lock = asyncio.Lock()

        async def send(payload: dict) -> None:
            async with send_lock:
                await ws.send_json(payload)

        session.clients.add(client)
        await send(
            {
                "type": "hello",
                "version": PROTOCOL_VERSION,
                "map_digest": session.digest,
                "cycle": session.core.cycle,
                "paused": session.paused,
                "scenario": session.scenario.name,
            }
        )

        async def sender() -> None:
            while True:
                await client.event.wait()
                client.event.clear()
                frame = client.latest
                client.latest = None
                if frame is not None:
                    await send(frame)

        send_task = asyncio.create_task(sender())
        try:
            while True:
                raw = await ws.receive_text()
                reply = _handle_message(session, client, raw)
                if reply is not None:
                    await send(reply)
        except WebSocketDisconnect:
            pass
        finally:
            send_task.cancel()
            session.clients.discard(client)

    return app


def _handle_message(session: SimulationSession, client: _Client, raw: str) -> dict | None:
    try:
        message = json.loads(raw)
        if not isinstance(message, dict):
            raise ValueError("message must be a JSON object")
        kind = message["type"]
    except (ValueError, KeyError) as exc:
        return {
            "type": "error",
            "version": PROTOCOL_VERSION,
            "message": f"malformed message: {exc}",
        }
    if kind == "goal":
        try:
            goal = Pose(
                float(message["x"]), float(message["y"]), float(message.get("heading", 0.0))
            )
        except (KeyError, TypeError, ValueError) as exc:
            return {
                "type": "error",
                "version": PROTOCOL_VERSION,
                "message": f"malformed goal: {exc}",
            }
        return session.submit_goal(goal, client, message.get("request_id"))
    if kind == "pause":
        session.set_paused(True)
        return session.status()
    if kind == "resume":
        session.set_paused(False)
        return session.status()
    if kind == "step":
        session.request_step()
        return session.status()
    if kind == "reset":
        session.reset()
        return session.status()
    if kind == "ping":
        return {"type": "pong", "version": PROTOCOL_VERSION, "cycle": session.core.cycle}
    return {
        "type": "error",
        "version": PROTOCOL_VERSION,
        "message": f"unknown message type {kind!r}",
    }
