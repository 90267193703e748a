"""Scenario definition and TOML loading for simulation runs."""
from __future__ import annotations

import sys
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np

from .ds_control import AttractorField, DampingSpec
from .model import RobotModel, desk_model, make_model
from .qp import QpParams
from .sdf import Obstacle

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class ObstacleSpec:
    """Obstacle with scripted motion: static, constant-velocity or sinusoid."""

    id: str
    center: np.ndarray
    radius: float
    kind: str = "static"  # static | linear | sinusoid
    velocity: np.ndarray = None  # linear motion
    axis: np.ndarray = None  # sinusoid direction
    amplitude: float = 0.1
    omega: float = 2.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(2)
        if self.velocity is None:
            self.velocity = np.zeros(2)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(2)
        if self.axis is None:
            self.axis = np.array([0.0, 1.0])
        self.axis = np.asarray(self.axis, dtype=float).reshape(2)
        if self.kind not in ("static", "linear", "sinusoid"):
            raise ValueError(f"unknown obstacle kind {self.kind!r}")

    def at(self, t: float) -> Obstacle:
        if self.kind == "static":
            return Obstacle(id=self.id, center=self.center, radius=self.radius, velocity=np.zeros(2))
        if self.kind == "linear":
            return Obstacle(
                id=self.id,
                center=self.center + t * self.velocity,
                radius=self.radius,
                velocity=self.velocity,
            )
        p = self.center + self.axis * self.amplitude * np.sin(self.omega * t)
        v = self.axis * self.amplitude * self.omega * np.cos(self.omega * t)
        return Obstacle(id=self.id, center=p, radius=self.radius, velocity=v)


@dataclass
class Push:
    """Scripted external disturbance active on [t_start, t_end)."""

    t_start: float
    t_end: float
    kind: str  # joint | task
    value: np.ndarray

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=float)
        if self.kind not in ("joint", "task"):
            raise ValueError(f"unknown push kind {self.kind!r}")


@dataclass
class Scenario:
    robot: RobotModel = dc_field(default_factory=desk_model)
    field: AttractorField = dc_field(
        default_factory=lambda: AttractorField(x_star=[0.5, 0.3], P=-6.0 * np.eye(2))
    )
    damping: DampingSpec = dc_field(default_factory=DampingSpec)
    obstacles: list = dc_field(default_factory=list)
    sca_on: bool = False
    eca_on: bool = False
    duration: float = 6.0
    control_dt: float = 0.005
    physics_dt: float = 0.001
    dt_brake: float = 0.001
    seed: int = 0
    initial_q: Optional[np.ndarray] = None
    initial_qd: Optional[np.ndarray] = None
    pushes: list = dc_field(default_factory=list)
    qp: QpParams = dc_field(default_factory=QpParams)
    margin: float = 0.05  # required clearance to obstacle surfaces
    eps_eca: float = 0.1  # ECA activation band on clearance
    gamma_thr: Optional[float] = None  # None -> trained model's threshold
    eps_sca: Optional[float] = None  # None -> trained model's band
    beta: float = 80.0
    sv_cap: int = 120
    guard_pos: float = 1e-3  # bound shrink absorbing torque-hold discretization
    guard_vel: float = 1e-2
    guard_qdd: float = 0.2  # plan with this fraction of braking authority held back
    monitor_lambda1: Optional[float] = None  # None -> damping.lambda1
    monitor_tol: float = 1e-3
    debug_checks: bool = False
    sca_model_path: Optional[str] = None
    sdf_set_path: Optional[str] = None
    name: str = "scenario"

    def __post_init__(self):
        if self.physics_dt > self.control_dt + 1e-12:
            raise ValueError("physics_dt must be <= control_dt")
        if self.duration < 0:
            raise ValueError("duration must be nonnegative")
        if self.initial_q is not None:
            self.initial_q = np.asarray(self.initial_q, dtype=float).reshape(self.robot.n)
        if self.initial_qd is not None:
            self.initial_qd = np.asarray(self.initial_qd, dtype=float).reshape(self.robot.n)

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.control_dt))


def _robot_from_dict(d: dict) -> RobotModel:
    if not d:
        return desk_model()
    kw = {}
    for key in (
        "link_com_offsets",
        "link_inertias",
        "link_radii",
        "gravity",
        "q_lower",
        "q_upper",
        "qd_max",
        "qdd_max",
        "tau_min",
        "tau_max",
    ):
        if key in d:
            kw[key] = d[key]
    return make_model(d["link_lengths"], d["link_masses"], **kw)


def scenario_from_dict(cfg: dict, name: str = "scenario") -> Scenario:
    robot = _robot_from_dict(cfg.get("robot", {}))
    fld = cfg.get("field", {})
    field_obj = AttractorField(
        x_star=fld.get("x_star", [0.5, 0.3]),
        P=np.asarray(fld.get("P", (-6.0 * np.eye(2)).tolist()), dtype=float),
    )
    dmp = cfg.get("damping", {})
    damping = DampingSpec(
        lambda1=dmp.get("lambda1", 40.0),
        lambda2=dmp.get("lambda2", 20.0),
        eta_f=dmp.get("eta_f", 1e-4),
    )
    obstacles = []
    for i, o in enumerate(cfg.get("obstacles", [])):
        obstacles.append(
            ObstacleSpec(
                id=str(o.get("id", f"obs{i}")),
                center=o["center"],
                radius=float(o["radius"]),
                kind=o.get("kind", "static"),
                velocity=o.get("velocity"),
                axis=o.get("axis"),
                amplitude=float(o.get("amplitude", 0.1)),
                omega=float(o.get("omega", 2.0)),
            )
        )
    pushes = [
        Push(
            t_start=float(p["t_start"]),
            t_end=float(p["t_end"]),
            kind=p.get("kind", "joint"),
            value=p["value"],
        )
        for p in cfg.get("pushes", [])
    ]
    toggles = cfg.get("toggles", {})
    if toggles.get("jnt", True) is not True:
        raise ValueError("joint-limit constraints cannot be disabled")
    run = cfg.get("run", {})
    ctrl = cfg.get("controller", {})
    qp = QpParams(
        alpha1=float(ctrl.get("alpha1", 1e-4)),
        alpha2=float(ctrl.get("alpha2", 1e2)),
        sigma=float(ctrl.get("sigma", 0.05)),
    )
    models = cfg.get("models", {})
    return Scenario(
        robot=robot,
        field=field_obj,
        damping=damping,
        obstacles=obstacles,
        sca_on=bool(toggles.get("sca", False)),
        eca_on=bool(toggles.get("eca", False)),
        duration=float(run.get("duration", 6.0)),
        control_dt=float(run.get("control_dt", 0.005)),
        physics_dt=float(run.get("physics_dt", 0.001)),
        dt_brake=float(run.get("dt_brake", 0.001)),
        seed=int(run.get("seed", 0)),
        initial_q=run.get("initial_q"),
        initial_qd=run.get("initial_qd"),
        pushes=pushes,
        qp=qp,
        margin=float(ctrl.get("margin", 0.05)),
        eps_eca=float(ctrl.get("eps_eca", 0.1)),
        gamma_thr=ctrl.get("gamma_thr"),
        eps_sca=ctrl.get("eps_sca"),
        beta=float(ctrl.get("beta", 80.0)),
        sv_cap=int(ctrl.get("sv_cap", 120)),
        guard_pos=float(ctrl.get("guard_pos", 1e-3)),
        guard_vel=float(ctrl.get("guard_vel", 1e-2)),
        guard_qdd=float(ctrl.get("guard_qdd", 0.2)),
        monitor_lambda1=ctrl.get("monitor_lambda1"),
        monitor_tol=float(ctrl.get("monitor_tol", 1e-3)),
        debug_checks=bool(run.get("debug_checks", False)),
        sca_model_path=models.get("sca"),
        sdf_set_path=models.get("sdf"),
        name=name,
    )


def load_scenario(path) -> Scenario:
    path = Path(path)
    with open(path, "rb") as f:
        cfg = tomllib.load(f)
    sc = scenario_from_dict(cfg, name=path.stem)
    # model paths are relative to the scenario file
    for attr in ("sca_model_path", "sdf_set_path"):
        p = getattr(sc, attr)
        if p is not None and not Path(p).is_absolute():
            setattr(sc, attr, str(path.parent / p))
    return sc


def apply_toggle_overrides(sc: Scenario, overrides) -> Scenario:
    """CLI-style `sca=off` / `eca=on` strings applied onto a scenario."""
    for ov in overrides:
        key, _, val = ov.partition("=")
        flag = val.strip().lower() in ("on", "true", "1", "yes")
        if key.strip() == "sca":
            sc.sca_on = flag
        elif key.strip() == "eca":
            sc.eca_on = flag
        elif key.strip() == "jnt":
            if not flag:
                raise ValueError("joint-limit constraints cannot be disabled")
        else:
            raise ValueError(f"unknown toggle {key!r}")
    return sc
