"""Braking rollouts and analytic joint-limit viability acceleration bounds."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import JointState, RobotModel

FEAS_TOL = 1e-9  # absorbs roundoff when the box collapses to a point


@dataclass(frozen=True)
class HalfSpace:
    """Affine acceleration constraint g . qdd + b >= 0."""

    g: np.ndarray
    b: float
    kind: str  # "sca" or "eca"

    def __post_init__(self):
        g = np.asarray(self.g, dtype=float).reshape(-1)
        if not (np.all(np.isfinite(g)) and np.isfinite(self.b)):
            raise ValueError("half-space coefficients must be finite")
        object.__setattr__(self, "g", g)


@dataclass(frozen=True)
class BrakingTrajectory:
    """Sampled maximum-deceleration stop from an initial state."""

    times: np.ndarray  # (T,)
    q: np.ndarray  # (T, n)
    qd: np.ndarray  # (T, n)
    t_brake: float


@dataclass(frozen=True)
class ViableAccelBox:
    """Per-joint admissible acceleration interval from joint-limit viability."""

    qdd_lb: np.ndarray
    qdd_ub: np.ndarray
    feasible: np.ndarray  # bool per joint

    @property
    def all_feasible(self) -> bool:
        return bool(np.all(self.feasible))


def braking_time(model: RobotModel, qd) -> float:
    qd = np.asarray(qd, dtype=float).reshape(-1)
    return float(np.max(np.abs(qd) / model.qdd_max))


def brake_kinematics(q0, qd0, qdd_max, t):
    """Closed-form state of the element-wise braking motion at times t.

    q0, qd0: (..., n); t: (...,) broadcastable against the leading shape.
    Each joint decelerates at qdd_max opposite its velocity and clamps to
    zero exactly at its own stop time.
    """
    q0 = np.asarray(q0, dtype=float)
    qd0 = np.asarray(qd0, dtype=float)
    a = np.asarray(qdd_max, dtype=float)
    t = np.asarray(t, dtype=float)[..., None]
    t_stop = np.abs(qd0) / a
    te = np.minimum(t, t_stop)
    s = np.sign(qd0)
    q = q0 + qd0 * te - 0.5 * s * a * te**2
    qd = np.where(te < t_stop, qd0 - s * a * te, 0.0)
    return q, qd


def braking_rollout(model: RobotModel, state: JointState, dt_brake: float) -> BrakingTrajectory:
    """Element-wise maximum-deceleration stop, sampled every dt_brake.

    Kinematic integration only; the last sample lands exactly at the full
    stop with zero velocity.
    """
    if dt_brake <= 0:
        raise ValueError("dt_brake must be positive")
    t_br = braking_time(model, state.qd)
    if t_br == 0.0:
        return BrakingTrajectory(
            times=np.zeros(1),
            q=state.q[None, :].copy(),
            qd=np.zeros((1, state.n)),
            t_brake=0.0,
        )
    k = int(np.floor(t_br / dt_brake + 1e-12))
    times = np.arange(k + 1) * dt_brake
    if times[-1] < t_br - 1e-15:
        times = np.append(times, t_br)
    else:
        times[-1] = t_br
    q, qd = brake_kinematics(state.q, state.qd, model.qdd_max, times)
    qd[-1] = 0.0
    return BrakingTrajectory(times=times, q=q, qd=qd, t_brake=t_br)


def joint_limit_accel_bounds(model: RobotModel, state: JointState, dt: float) -> ViableAccelBox:
    """Tightest per-joint acceleration box keeping (q, qd) viable for limits.

    Intersects, per joint: the hardware bound |qdd| <= qdd_max, the one-step
    velocity bound, the one-step second-order position bound, and the
    stoppability bound obtained by squaring the next-state braking
    inequality (a quadratic in qdd).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    q, qd = state.q, state.qd
    a = model.qdd_max
    qp, qm = model.q_upper, model.q_lower

    ub = np.minimum.reduce([a, (model.qd_max - qd) / dt, 2.0 * (qp - q - dt * qd) / dt**2])
    lb = np.maximum.reduce([-a, (-model.qd_max - qd) / dt, 2.0 * (qm - q - dt * qd) / dt**2])

    # stoppability toward q_upper: (qd + dt qdd)^2 <= 2 a (q_up - q') whenever
    # the next velocity is positive; accelerations making it non-positive are
    # unconstrained by this branch, and the union stays contiguous because
    # the position bound excludes any gap.
    A = dt**2
    B = 2.0 * dt * qd + a * dt**2
    C0 = qd**2 - 2.0 * a * (qp - q - dt * qd)
    disc = B**2 - 4.0 * A * C0
    ub_via = np.where(disc >= 0.0, (-B + np.sqrt(np.maximum(disc, 0.0))) / (2.0 * A), -qd / dt)
    ub = np.minimum(ub, ub_via)

    # symmetric branch toward q_lower
    B2 = 2.0 * dt * qd - a * dt**2
    C2 = qd**2 - 2.0 * a * (q - qm + dt * qd)
    disc2 = B2**2 - 4.0 * A * C2
    lb_via = np.where(disc2 >= 0.0, (-B2 - np.sqrt(np.maximum(disc2, 0.0))) / (2.0 * A), -qd / dt)
    lb = np.maximum(lb, lb_via)

    feasible = lb <= ub + FEAS_TOL
    lb = np.where(feasible, np.minimum(lb, ub), lb)
    return ViableAccelBox(qdd_lb=lb, qdd_ub=ub, feasible=feasible)


def in_joint_feasible_set(model: RobotModel, q, qd, tol: float = 0.0) -> bool:
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    return bool(
        np.all(q >= model.q_lower - tol)
        and np.all(q <= model.q_upper + tol)
        and np.all(np.abs(qd) <= model.qd_max + tol)
    )


def is_viable_jnt(model: RobotModel, state: JointState, dt: float) -> bool:
    """True iff the state is inside the joint feasible set and every joint
    admits at least one acceleration in its viability box."""
    if not in_joint_feasible_set(model, state.q, state.qd):
        return False
    return joint_limit_accel_bounds(model, state, dt).all_feasible


def braking_witness_accel(model: RobotModel, state: JointState, dt: float) -> np.ndarray:
    """One-step acceleration realizing the braking stop, clamped at the
    velocity zero-crossing so a full step never overshoots the sign flip."""
    return -np.sign(state.qd) * np.minimum(model.qdd_max, np.abs(state.qd) / dt)


def _clip_polygon_halfplane(poly, g2, b):
    """Sutherland-Hodgman clip of polygon by {p : g2 . p + b >= 0}."""
    out = []
    m = len(poly)
    for i in range(m):
        p0 = poly[i]
        p1 = poly[(i + 1) % m]
        v0 = g2 @ p0 + b
        v1 = g2 @ p1 + b
        if v0 >= 0:
            out.append(p0)
        if (v0 >= 0) != (v1 >= 0):
            t = v0 / (v0 - v1)
            out.append(p0 + t * (p1 - p0))
    return out


def admissible_accel_box_2d(
    box: ViableAccelBox,
    halfspaces,
    joints=(0, 1),
    rest_accel=None,
):
    """Bounding box of the admissible (qdd_i, qdd_j) region.

    Starts from the joint-limit box for the two selected joints and clips by
    each half-space with the remaining accelerations held at rest_accel
    (zeros by default). Returns (lb2, ub2) arrays or None when empty.
    """
    i, j = joints
    if not (box.feasible[i] and box.feasible[j]):
        return None
    n = box.qdd_lb.size
    rest = np.zeros(n) if rest_accel is None else np.asarray(rest_accel, dtype=float)
    lo = np.array([box.qdd_lb[i], box.qdd_lb[j]])
    hi = np.array([box.qdd_ub[i], box.qdd_ub[j]])
    poly = [
        np.array([lo[0], lo[1]]),
        np.array([hi[0], lo[1]]),
        np.array([hi[0], hi[1]]),
        np.array([lo[0], hi[1]]),
    ]
    for hs in halfspaces:
        g2 = np.array([hs.g[i], hs.g[j]])
        offset = hs.b + hs.g @ rest - g2 @ rest[[i, j]]
        poly = _clip_polygon_halfplane(poly, g2, offset)
        if not poly:
            return None
    pts = np.array(poly)
    return pts.min(axis=0), pts.max(axis=0)
