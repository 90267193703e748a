"""Deterministic control-loop simulator, trajectory log, and run metrics."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .ds_control import damping_matrix, ds_velocity
from .dynamics import (
    damped_pinv_transpose,
    dynamics_terms,
    forward_kinematics,
    jacobian,
    link_frames,
)
from .geometry import point_segment_distance, self_collision_distance
from .model import JointState, RobotModel
from .qp import ControlOutput, Gates, PassivityMonitor, build_qp, solve_qp
from .sca import DEFAULT_GAMMA_THR, ScaModel, gamma_with_grad, load_sca_model
from .scenario import Scenario
from .sdf import SvRolloutBatch, eca_constraint, load_sdf_set
from .viability import HalfSpace, joint_limit_accel_bounds

LOG_SCHEMA = "planarm-trajlog/1"
STATUS_CODES = {"optimal": 0.0, "clamped": 1.0, "fallback_braking": 2.0}


@dataclass
class TrajectoryLog:
    fields: list
    rows: np.ndarray  # (steps, len(fields))
    n: int
    n_obstacles: int
    control_dt: float
    meta: dict = dc_field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.fields.index(name)]

    def columns(self, prefix: str) -> np.ndarray:
        idx = [i for i, f in enumerate(self.fields) if f == prefix or f.startswith(prefix + "_")]
        return self.rows[:, idx]

    @property
    def times(self) -> np.ndarray:
        return self.column("t")

    @property
    def x(self) -> np.ndarray:
        return self.columns("x")

    def payload_bytes(self, exclude=("wall_clock",)) -> bytes:
        keep = [i for i, f in enumerate(self.fields) if f not in exclude]
        return self.rows[:, keep].astype("<f8").tobytes()


def log_field_names(n: int, n_obstacles: int) -> list:
    names = ["t"]
    names += [f"q_{i}" for i in range(n)]
    names += [f"qd_{i}" for i in range(n)]
    names += ["x_0", "x_1", "xd_0", "xd_1"]
    names += [f"tau_{i}" for i in range(n)]
    names += ["delta", "gamma"]
    names += [f"sv_{k}" for k in range(n_obstacles)]
    names += ["min_self_dist", "min_obs_clearance"]
    names += [f"box_lb_{i}" for i in range(n)]
    names += [f"box_ub_{i}" for i in range(n)]
    names += ["status", "passivity_residual", "wall_clock"]
    return names


def save_log(log: TrajectoryLog, path) -> None:
    header = {
        "schema": LOG_SCHEMA,
        "fields": log.fields,
        "n": log.n,
        "n_obstacles": log.n_obstacles,
        "control_dt": log.control_dt,
        "meta": log.meta,
    }
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for row in log.rows:
            f.write(row.astype("<f8").tobytes().hex() + "\n")


def load_log(path) -> TrajectoryLog:
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("schema") != LOG_SCHEMA:
            raise ValueError(f"unsupported log schema {header.get('schema')!r}")
        rows = [np.frombuffer(bytes.fromhex(line.strip()), dtype="<f8") for line in f if line.strip()]
    rows = np.array(rows) if rows else np.zeros((0, len(header["fields"])))
    return TrajectoryLog(
        fields=header["fields"],
        rows=rows,
        n=header["n"],
        n_obstacles=header["n_obstacles"],
        control_dt=header["control_dt"],
        meta=header.get("meta", {}),
    )


@dataclass
class Metrics:
    loop_rate: float
    path_length: float
    normalized_jerk: float
    min_self_distance: float
    min_obstacle_clearance: float
    converged: bool

    CSV_HEADER = (
        "name,loop_rate_hz,path_length_m,normalized_jerk,"
        "min_self_distance_m,min_obstacle_clearance_m,converged"
    )

    def csv_row(self, name: str) -> str:
        return (
            f"{name},{self.loop_rate:.6g},{self.path_length:.6g},{self.normalized_jerk:.6g},"
            f"{self.min_self_distance:.6g},{self.min_obstacle_clearance:.6g},{int(self.converged)}"
        )


def path_length_xy(x: np.ndarray) -> float:
    if x.shape[0] < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(x, axis=0), axis=1)))


def path_length(log: TrajectoryLog) -> float:
    if log.rows.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    return path_length_xy(log.x)


def normalized_jerk_xy(t: np.ndarray, x: np.ndarray) -> float:
    """NJ = (1 / L^2 T^5) * integral of squared jerk, jerk by 5-point central
    third differences, trapezoid quadrature over the interior samples."""
    if x.shape[0] < 4:
        raise ValueError("need at least 4 samples for third differences")
    L = path_length_xy(x)
    if L <= 0.0:
        raise ValueError("degenerate path: zero length")
    T = float(t[-1] - t[0])
    h = float(np.mean(np.diff(t)))
    if x.shape[0] >= 5:
        jerk = (x[4:] - 2 * x[3:-1] + 2 * x[1:-3] - x[:-4]) / (2 * h**3)
        tj = t[2:-2]
    else:
        jerk = (x[3:] - 3 * x[2:-1] + 3 * x[1:-2] - x[:-3]) / h**3
        tj = t[: jerk.shape[0]]
    j2 = np.sum(jerk**2, axis=1)
    integral = float(np.trapezoid(j2, tj)) if j2.size > 1 else float(j2[0]) * h
    return integral / (L**2 * T**5)


def normalized_jerk(log: TrajectoryLog) -> float:
    return normalized_jerk_xy(log.times, log.x)


def loop_rate(log: TrajectoryLog) -> float:
    wall = float(np.sum(log.column("wall_clock")))
    steps = log.rows.shape[0]
    if steps == 0 or wall <= 0:
        raise ValueError("no wall-clock timing recorded")
    return steps / wall


def min_obstacle_clearance_at(model: RobotModel, q, obstacles) -> float:
    """Exact capsule clearance from every obstacle surface (not SDF-based)."""
    if not obstacles:
        return float("inf")
    pts, _ = link_frames(model, q)
    best = float("inf")
    for obs in obstacles:
        for i in range(model.n):
            d = float(point_segment_distance(obs.center, pts[i], pts[i + 1]))
            best = min(best, d - model.link_radii[i] - obs.radius)
    return best


class SimEngine:
    """Stepwise control-loop simulator shared by headless runs and teleop."""

    def __init__(
        self,
        scenario: Scenario,
        sca_model: Optional[ScaModel] = None,
        sdf_set: Optional[list] = None,
    ):
        self.sc = scenario
        self.model = scenario.robot
        if sca_model is None and scenario.sca_model_path:
            sca_model = load_sca_model(scenario.sca_model_path)
        if sdf_set is None and scenario.sdf_set_path:
            sdf_set = load_sdf_set(scenario.sdf_set_path)
        if scenario.sca_on and sca_model is None:
            raise FileNotFoundError("SCA toggle requires a trained score model")
        if scenario.eca_on and sdf_set is None:
            raise FileNotFoundError("ECA toggle requires a fitted SDF set")
        self.sca_model = sca_model
        self.sdf_set = sdf_set
        self.guarded = self.model.with_limits(
            q_lower=self.model.q_lower + scenario.guard_pos,
            q_upper=self.model.q_upper - scenario.guard_pos,
            qd_max=self.model.qd_max - scenario.guard_vel,
            qdd_max=self.model.qdd_max * (1.0 - scenario.guard_qdd),
        )
        q0 = scenario.initial_q if scenario.initial_q is not None else self._default_q0()
        qd0 = scenario.initial_qd if scenario.initial_qd is not None else np.zeros(self.model.n)
        self.state = JointState(q=q0, qd=qd0)
        self.t = 0.0
        self.step_index = 0
        self.warm: Optional[np.ndarray] = None
        lam1 = scenario.monitor_lambda1
        self.monitor = PassivityMonitor(
            scenario.field,
            lambda1=scenario.damping.lambda1 if lam1 is None else lam1,
            dt=scenario.control_dt,
            tol_power=scenario.monitor_tol,
            sigma=scenario.qp.sigma,
        )
        self.gamma_thr = scenario.gamma_thr
        if self.gamma_thr is None:
            self.gamma_thr = sca_model.gamma_thr if sca_model else DEFAULT_GAMMA_THR
        self.eps_sca = scenario.eps_sca
        if self.eps_sca is None:
            self.eps_sca = sca_model.epsilon_sca if sca_model else 2.0 * self.gamma_thr
        self.fields = log_field_names(self.model.n, len(scenario.obstacles))
        # log width is fixed at init; obstacles added live still constrain
        # and feed the clearance column but get no dedicated sv column
        self._n_sv_slots = len(scenario.obstacles)
        # reach from each joint to the tip, bounds point travel per unit angle
        self._joint_reach = np.cumsum(self.model.link_lengths[::-1])[::-1].copy()
        self._rows = []
        # mutable runtime targets (teleop can swap these between steps)
        self.field = scenario.field
        self.obstacle_specs = list(scenario.obstacles)
        self.sca_on = scenario.sca_on
        self.eca_on = scenario.eca_on
        self.extra_push: Optional[tuple] = None  # (t_end, tau_vector)

    def _default_q0(self) -> np.ndarray:
        lo, hi = self.model.q_lower, self.model.q_upper
        return np.clip(np.zeros(self.model.n), lo + 0.1, hi - 0.1)

    def _pushes_at(self, t: float):
        tau = np.zeros(self.model.n)
        f_task = np.zeros(2)
        for p in self.sc.pushes:
            if p.t_start <= t < p.t_end:
                if p.kind == "joint":
                    tau = tau + p.value
                else:
                    f_task = f_task + p.value
        if self.extra_push is not None:
            t_end, vec = self.extra_push
            if t < t_end:
                tau = tau + vec
            else:
                self.extra_push = None
        return tau, f_task

    def obstacles_at(self, t: float):
        return [spec.at(t) for spec in self.obstacle_specs]

    def step(self) -> dict:
        t0 = time.perf_counter()
        sc = self.sc
        model = self.model
        state = self.state
        obstacles = self.obstacles_at(self.t)

        terms = dynamics_terms(model, state)
        J = jacobian(model, state.q)
        W = damped_pinv_transpose(J, sc.qp.sigma)
        x = forward_kinematics(model, state.q)
        xd = J @ state.qd
        f_des = ds_velocity(self.field, x)
        D = damping_matrix(self.field, sc.damping, x)
        F_c = W @ terms.G - D @ (xd - f_des)

        box = joint_limit_accel_bounds(self.guarded, state, sc.control_dt)
        gates = Gates(accel_box=box)
        gamma_val = float("nan")
        if self.sca_on:
            gamma_val, d_q, d_qd = gamma_with_grad(self.sca_model, state)
            if gamma_val <= self.eps_sca:  # includes the breach region
                g_se = 0.5 * d_q * sc.control_dt**2 + d_qd * sc.control_dt
                b_s = float(d_q @ state.qd) * sc.control_dt
                gates.sca.append(HalfSpace(g=g_se, b=b_s, kind="sca"))
                gates.breach = gates.breach or gamma_val <= 0.0
            gates.gamma = gamma_val
        sv_vals = [float("nan")] * self._n_sv_slots
        if self.eca_on and obstacles:
            # worst-case braking sweep of any link point, used to rule out
            # obstacles that cannot possibly activate this cycle
            sweep = float(
                np.sum(state.qd**2 / (2.0 * model.qdd_max) * self._joint_reach)
            )
            softmin_gap = np.log(max(sc.sv_cap, 1)) / sc.beta
            batch = None
            for k, obs in enumerate(obstacles):
                quick = min_obstacle_clearance_at(model, state.q, [obs])
                if quick - sweep - softmin_gap - 0.01 > sc.eps_eca + sc.margin:
                    continue
                if batch is None:
                    batch = SvRolloutBatch(model, state, dt_brake=sc.dt_brake, cap=sc.sv_cap)
                hs, sv = eca_constraint(
                    model, self.sdf_set, state, obs, sc.control_dt,
                    dt_brake=sc.dt_brake, beta=sc.beta, batch=batch,
                )
                clearance = sv.value - obs.radius - sc.margin
                if k < self._n_sv_slots:
                    sv_vals[k] = clearance
                if clearance <= sc.eps_eca:
                    gates.eca.append(hs)
                    gates.sv.append(clearance)
                    gates.breach = gates.breach or clearance <= 0.0

        qp = build_qp(model, state, F_c, gates, sc.qp, terms=terms, W=W)
        out = solve_qp(
            qp, model, state, sc.control_dt, warm=self.warm, params=sc.qp,
            check_kkt=sc.debug_checks,
        )
        self.warm = np.r_[out.tau, out.delta] if qp.n_eca else out.tau.copy()

        tau_ext_cmd, f_task = self._pushes_at(self.t)
        residual, passive = self.monitor.step(model, state, W @ out.tau, f_task)
        out.passivity_residual = residual

        # hold tau over the physics sub-steps (semi-implicit Euler)
        n_sub = max(int(round(sc.control_dt / sc.physics_dt)), 1)
        h = sc.control_dt / n_sub
        st = state
        for j in range(n_sub):
            t_sub = self.t + j * h
            tau_ext, f_task_sub = self._pushes_at(t_sub)
            if np.any(f_task_sub):
                tau_ext = tau_ext + jacobian(model, st.q).T @ f_task_sub
            te = dynamics_terms(model, st)
            qdd = np.linalg.solve(te.M, out.tau + tau_ext - te.C @ st.qd - te.G)
            qd_new = st.qd + h * qdd
            st = JointState(q=st.q + h * qd_new, qd=qd_new)
        if not np.all(np.isfinite(st.q)) or not np.all(np.isfinite(st.qd)):
            raise FloatingPointError(f"state became non-finite at t={self.t:.4f}")
        self.state = st

        wall = time.perf_counter() - t0
        row = np.concatenate(
            [
                [self.t],
                state.q,
                state.qd,
                x,
                xd,
                out.tau,
                [out.delta, gamma_val],
                sv_vals,
                [
                    self_collision_distance(model, state.q)
                    if model.n >= 3
                    else float("inf")
                ],
                [min_obstacle_clearance_at(model, state.q, obstacles)],
                box.qdd_lb,
                box.qdd_ub,
                [STATUS_CODES[out.status], residual, wall],
            ]
        )
        self._rows.append(row)
        self.t += sc.control_dt
        self.step_index += 1
        return {"output": out, "gates": gates, "x": x, "box": box}

    def finish(self) -> TrajectoryLog:
        rows = np.array(self._rows) if self._rows else np.zeros((0, len(self.fields)))
        return TrajectoryLog(
            fields=self.fields,
            rows=rows,
            n=self.model.n,
            n_obstacles=self._n_sv_slots,
            control_dt=self.sc.control_dt,
            meta={"name": self.sc.name, "seed": self.sc.seed},
        )


def compute_metrics(log: TrajectoryLog, scenario: Scenario) -> Metrics:
    if log.rows.shape[0] == 0:
        return Metrics(
            loop_rate=0.0,
            path_length=0.0,
            normalized_jerk=float("nan"),
            min_self_distance=float("inf"),
            min_obstacle_clearance=float("inf"),
            converged=False,
        )
    x = log.x
    L = path_length_xy(x)
    try:
        nj = normalized_jerk_xy(log.times, x)
    except ValueError:
        nj = float("nan")
    final_err = float(np.linalg.norm(x[-1] - scenario.field.x_star))
    return Metrics(
        loop_rate=loop_rate(log),
        path_length=L,
        normalized_jerk=nj,
        min_self_distance=float(np.min(log.column("min_self_dist"))),
        min_obstacle_clearance=float(np.min(log.column("min_obs_clearance"))),
        converged=final_err <= 0.02,
    )


def check_safety(log: TrajectoryLog, scenario: Scenario, vel_tol: float = 1e-6):
    """Violations of the per-toggle safety invariants over a finished log."""
    problems = []
    if log.rows.shape[0] == 0:
        return problems
    model = scenario.robot
    q = log.columns("q")[:, : model.n]
    qd = log.columns("qd")[:, : model.n]
    if np.any(q < model.q_lower) or np.any(q > model.q_upper):
        problems.append("joint position bound violated")
    if np.any(np.abs(qd) > model.qd_max + vel_tol):
        problems.append("joint velocity bound violated")
    if scenario.sca_on and np.min(log.column("min_self_dist")) <= 0.0:
        problems.append("self-collision occurred")
    if scenario.eca_on and scenario.obstacles:
        if np.min(log.column("min_obs_clearance")) < scenario.margin - 0.005:
            problems.append("obstacle clearance fell below margin")
    return problems


def run_scenario(
    scenario: Scenario,
    sca_model: Optional[ScaModel] = None,
    sdf_set: Optional[list] = None,
):
    """Run the control loop to completion; returns (TrajectoryLog, Metrics)."""
    engine = SimEngine(scenario, sca_model=sca_model, sdf_set=sdf_set)
    for _ in range(scenario.n_steps):
        engine.step()
    log = engine.finish()
    return log, compute_metrics(log, scenario)
