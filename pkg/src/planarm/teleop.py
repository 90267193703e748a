"""WebSocket bridge: streams control-loop snapshots, accepts operator commands.

Exactly two activities run: the control loop (a thread) and the network
endpoint (asyncio). They exchange data only through a single-slot per-kind
command mailbox and an atomically swapped latest-snapshot cell; neither ever
waits on the other.
"""
from __future__ import annotations

import asyncio
import json
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ds_control import AttractorField
from .scenario import ObstacleSpec, Scenario
from .sim import SimEngine, TrajectoryLog, compute_metrics, save_log

SCHEMA_VERSION = "1.0"

COMMAND_KINDS = (
    "set_target",
    "move_obstacle",
    "add_obstacle",
    "remove_obstacle",
    "toggle",
    "push",
)


def snapshot_schema_version() -> str:
    return SCHEMA_VERSION


class CommandMailbox:
    """Latest-wins slot per command kind; writers never block readers."""

    def __init__(self):
        self._lock = threading.Lock()
        self._slots: dict = {}

    def put(self, kind: str, seq: int, payload: dict) -> None:
        with self._lock:
            self._slots[kind] = (seq, payload)

    def drain(self) -> dict:
        with self._lock:
            out = self._slots
            self._slots = {}
        return out


@dataclass
class CommandError(Exception):
    message: str


def _as_vec2(value, name: str) -> np.ndarray:
    try:
        v = np.asarray(value, dtype=float).reshape(2)
    except Exception:
        raise CommandError(f"{name} must be a 2-vector") from None
    if not np.all(np.isfinite(v)):
        raise CommandError(f"{name} must be finite")
    return v


def validate_command(kind: str, payload: dict, workspace: float, n_joints: int) -> dict:
    """Normalize one command payload; raises CommandError on bad input."""
    if kind == "set_target":
        x = _as_vec2(payload.get("x"), "target")
        if np.max(np.abs(x)) > workspace:
            raise CommandError("target outside workspace bounding box")
        return {"x": x}
    if kind == "move_obstacle":
        return {"id": str(payload.get("id")), "p": _as_vec2(payload.get("p"), "obstacle position")}
    if kind == "add_obstacle":
        r = float(payload.get("radius", 0.0))
        if not (0.0 < r <= 0.3):
            raise CommandError("obstacle radius must be in (0, 0.3]")
        return {"p": _as_vec2(payload.get("p"), "obstacle position"), "radius": r,
                "id": str(payload.get("id", ""))}
    if kind == "remove_obstacle":
        return {"id": str(payload.get("id"))}
    if kind == "toggle":
        name = payload.get("constraint")
        if name not in ("sca", "eca"):
            raise CommandError("toggle constraint must be 'sca' or 'eca'")
        return {"constraint": name, "value": bool(payload.get("value"))}
    if kind == "push":
        tau = np.asarray(payload.get("tau", []), dtype=float).reshape(-1)
        if tau.size != n_joints or not np.all(np.isfinite(tau)):
            raise CommandError(f"push tau must be a {n_joints}-vector")
        dur = float(payload.get("duration", 0.0))
        if not (0.0 < dur <= 5.0):
            raise CommandError("push duration must be in (0, 5] seconds")
        return {"tau": tau, "duration": dur}
    raise CommandError(f"unknown command kind {kind!r}")


def apply_commands(engine: SimEngine, commands: dict) -> dict:
    """Apply the latest command of each kind before the next control step."""
    applied = {}
    for kind, (seq, payload) in commands.items():
        if kind == "set_target":
            engine.field = AttractorField(x_star=payload["x"], P=engine.field.P)
            # the storage potential is defined by the live target; re-baseline
            # so the operator's move does not read as generated energy
            engine.monitor.field = engine.field
            engine.monitor.reset()
        elif kind == "move_obstacle":
            for i, spec in enumerate(engine.obstacle_specs):
                if spec.id == payload["id"]:
                    engine.obstacle_specs[i] = ObstacleSpec(
                        id=spec.id, center=payload["p"], radius=spec.radius, kind="static"
                    )
                    break
        elif kind == "add_obstacle":
            oid = payload["id"] or f"obs{len(engine.obstacle_specs)}"
            engine.obstacle_specs.append(
                ObstacleSpec(id=oid, center=payload["p"], radius=payload["radius"], kind="static")
            )
        elif kind == "remove_obstacle":
            engine.obstacle_specs = [s for s in engine.obstacle_specs if s.id != payload["id"]]
        elif kind == "toggle":
            if payload["constraint"] == "sca":
                if payload["value"] and engine.sca_model is None:
                    continue
                engine.sca_on = payload["value"]
            else:
                if payload["value"] and engine.sdf_set is None:
                    continue
                engine.eca_on = payload["value"]
        elif kind == "push":
            engine.extra_push = (engine.t + payload["duration"], payload["tau"])
        applied[kind] = seq
    return applied


def build_snapshot(engine: SimEngine, step_info: dict, applied_seq: dict, seq: int) -> dict:
    out = step_info["output"]
    gates = step_info["gates"]
    box = step_info["box"]
    state = engine.state
    obstacles = engine.obstacles_at(engine.t)
    sv_map = {}
    row = engine._rows[-1] if engine._rows else None
    if row is not None:
        for k, spec in enumerate(engine.obstacle_specs):
            idx_name = f"sv_{k}"
            if idx_name in engine.fields:
                val = row[engine.fields.index(idx_name)]
                sv_map[spec.id] = None if np.isnan(val) else float(val)
    return {
        "type": "snapshot",
        "seq": seq,
        "t": engine.t,
        "step": engine.step_index,
        "q": state.q.tolist(),
        "qd": state.qd.tolist(),
        "x": step_info["x"].tolist(),
        "x_star": engine.field.x_star.tolist(),
        "obstacles": [
            {"id": o.id, "p": o.center.tolist(), "radius": o.radius} for o in obstacles
        ],
        "gamma": gates.gamma,
        "sv": sv_map,
        "accel_lb": box.qdd_lb.tolist(),
        "accel_ub": box.qdd_ub.tolist(),
        "active": [
            ":".join(str(part) for part in lab) if isinstance(lab, tuple) else str(lab)
            for lab in out.active_set
        ],
        "status": out.status,
        "delta": out.delta,
        "passivity_residual": out.passivity_residual,
        "toggles": {"sca": engine.sca_on, "eca": engine.eca_on},
        "applied_seq": applied_seq,
        "link_lengths": engine.model.link_lengths.tolist(),
        "link_radii": engine.model.link_radii.tolist(),
    }


@dataclass
class TeleopServer:
    scenario: Scenario
    port: int = 8080
    snapshot_hz: float = 50.0
    script_path: Optional[str] = None
    out_log: Optional[str] = None
    host: str = "127.0.0.1"
    mailbox: CommandMailbox = field(default_factory=CommandMailbox)
    stop_event: threading.Event = field(default_factory=threading.Event)

    def __post_init__(self):
        self.engine = SimEngine(self.scenario)
        self.latest_snapshot: Optional[str] = None
        self._snapshot_seq = 0
        self._applied_seq: dict = {}
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._wakeup: Optional[asyncio.Event] = None
        self._operator: Optional[object] = None
        self._clients: set = set()
        self.workspace = float(np.sum(self.scenario.robot.link_lengths)) + 0.2
        self.decimation = max(int(round(1.0 / (self.scenario.control_dt * self.snapshot_hz))), 1)
        self.finished_log: Optional[TrajectoryLog] = None
        self._script = None
        if self.script_path:
            self._script = []
            with open(self.script_path) as f:
                for line in f:
                    if line.strip():
                        self._script.append(json.loads(line))
            self._script.sort(key=lambda c: c.get("step", 0))

    # ----- control activity -----

    def control_loop(self):
        engine = self.engine
        sc = self.scenario
        paced = self._script is None
        next_deadline = time.perf_counter() + sc.control_dt
        script_idx = 0
        steps_limit = sc.n_steps if self._script is not None else None
        while not self.stop_event.is_set():
            if steps_limit is not None and engine.step_index >= steps_limit:
                break
            if self._script is not None:
                while (
                    script_idx < len(self._script)
                    and self._script[script_idx].get("step", 0) <= engine.step_index
                ):
                    cmd = self._script[script_idx]
                    script_idx += 1
                    try:
                        payload = validate_command(
                            cmd["kind"], cmd, self.workspace, engine.model.n
                        )
                    except CommandError:
                        continue
                    self.mailbox.put(cmd["kind"], int(cmd.get("seq", script_idx)), payload)
            commands = self.mailbox.drain()
            if commands:
                self._applied_seq.update(apply_commands(engine, commands))
            info = engine.step()
            if engine.step_index % self.decimation == 0:
                self._snapshot_seq += 1
                snap = build_snapshot(engine, info, dict(self._applied_seq), self._snapshot_seq)
                self.latest_snapshot = json.dumps(snap)
                self._notify()
            if paced:
                now = time.perf_counter()
                delay = next_deadline - now
                if delay > 0:
                    time.sleep(delay)
                next_deadline += sc.control_dt
        self.finished_log = engine.finish()
        if self.out_log:
            save_log(self.finished_log, self.out_log)
        self.stop_event.set()
        self._notify()

    def _notify(self):
        loop = self._loop
        if loop is not None and not loop.is_closed():
            loop.call_soon_threadsafe(self._set_wakeup)

    def _set_wakeup(self):
        if self._wakeup is not None:
            self._wakeup.set()

    # ----- network activity -----

    async def _handler(self, ws):
        role = "observer"
        if self._operator is None:
            self._operator = ws
            role = "operator"
        self._clients.add(ws)
        try:
            await ws.send(
                json.dumps(
                    {
                        "type": "hello",
                        "schema": SCHEMA_VERSION,
                        "role": role,
                        "scenario": {
                            "name": self.scenario.name,
                            "n": self.scenario.robot.n,
                            "control_dt": self.scenario.control_dt,
                            "workspace": self.workspace,
                            "link_lengths": self.scenario.robot.link_lengths.tolist(),
                            "link_radii": self.scenario.robot.link_radii.tolist(),
                            "margin": self.scenario.margin,
                        },
                    }
                )
            )
            async for raw in ws:
                try:
                    msg = json.loads(raw)
                except json.JSONDecodeError:
                    await ws.send(json.dumps({"type": "error", "message": "invalid JSON"}))
                    continue
                mtype = msg.get("type")
                if mtype == "release_role":
                    if self._operator is ws:
                        self._operator = None
                    continue
                if mtype != "command":
                    await ws.send(json.dumps({"type": "error", "message": "unknown frame type"}))
                    continue
                if self._operator is not ws:
                    await ws.send(
                        json.dumps({"type": "error", "message": "operator role not held"})
                    )
                    continue
                kind = msg.get("kind")
                seq = int(msg.get("seq", 0))
                try:
                    payload = validate_command(kind, msg, self.workspace, self.engine.model.n)
                except CommandError as exc:
                    await ws.send(
                        json.dumps({"type": "error", "message": exc.message, "seq": seq})
                    )
                    continue
                self.mailbox.put(kind, seq, payload)
        finally:
            self._clients.discard(ws)
            if self._operator is ws:
                self._operator = None

    async def _broadcaster(self):
        last_sent = None
        while not self.stop_event.is_set():
            try:
                await asyncio.wait_for(self._wakeup.wait(), timeout=0.25)
            except asyncio.TimeoutError:
                continue
            self._wakeup.clear()
            snap = self.latest_snapshot
            if snap is None or snap is last_sent:
                continue
            last_sent = snap
            dead = []
            for ws in list(self._clients):
                try:
                    await ws.send(snap)
                except Exception:
                    dead.append(ws)
            for ws in dead:
                self._clients.discard(ws)

    async def _main(self, ready_event=None):
        import websockets

        self._loop = asyncio.get_running_loop()
        self._wakeup = asyncio.Event()
        thread = threading.Thread(target=self.control_loop, daemon=True)
        async with websockets.serve(self._handler, self.host, self.port):
            thread.start()
            if ready_event is not None:
                ready_event.set()
            broadcaster = asyncio.create_task(self._broadcaster())
            while not self.stop_event.is_set():
                await asyncio.sleep(0.05)
            broadcaster.cancel()
        thread.join(timeout=5.0)

    def run(self, ready_event=None):
        try:
            asyncio.run(self._main(ready_event))
        except KeyboardInterrupt:
            self.stop_event.set()


def serve(
    scenario: Scenario,
    port: int = 8080,
    snapshot_hz: float = 50.0,
    script_path: Optional[str] = None,
    out_log: Optional[str] = None,
    host: str = "127.0.0.1",
) -> TeleopServer:
    server = TeleopServer(
        scenario,
        port=port,
        snapshot_hz=snapshot_hz,
        script_path=script_path,
        out_log=out_log,
        host=host,
    )
    server.run()
    return server
