"""Constrained torque QP: assembly, dense active-set solve, passivity monitor."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ds_control import AttractorField, potential
from .dynamics import damped_pinv_transpose, dynamics_terms, jacobian
from .model import JointState, RobotModel
from .viability import HalfSpace, ViableAccelBox, braking_witness_accel

KKT_TOL = 1e-8
FEAS_TOL = 1e-9


SLACK_SCALE = 1e-3  # meaningful slack values are millimetre-scale distance rates


@dataclass
class QpParams:
    alpha1: float = 1e-4  # torque regularization
    # the slack competes with a tracking term that peaks around 1e5; it must
    # stay expensive at delta ~ 1e-4 or the solver just buys its way out of
    # the obstacle constraint
    alpha2: float = 1e10
    # exact-penalty slope: a purely quadratic slack cost has zero marginal
    # price at delta = 0 and provably leaks under persistent pressure; the
    # linear term keeps delta at exactly zero whenever the row is feasible
    alpha3: float = 1e8
    sigma: float = 0.05  # damped pseudo-inverse regularization
    max_iter: int = 200


@dataclass
class Gates:
    """Constraint activation snapshot assembled by the harness."""

    accel_box: ViableAccelBox
    sca: list = field(default_factory=list)  # HalfSpace
    eca: list = field(default_factory=list)  # HalfSpace
    gamma: Optional[float] = None
    sv: list = field(default_factory=list)
    breach: bool = False  # state outside the learned viable set


@dataclass
class TorqueQP:
    Jhat_T: np.ndarray  # 2 x n torque -> task-force map
    F_c: np.ndarray
    alpha1: float
    alpha2: float
    sigma: float
    accel_box: ViableAccelBox
    halfspaces: list
    tau_min: np.ndarray
    tau_max: np.ndarray
    M: np.ndarray
    C: np.ndarray
    G: np.ndarray
    qd: np.ndarray
    # assembled rows (z = tau, plus one trailing slack column when ECA is on)
    G_rows: np.ndarray = None
    h_vec: np.ndarray = None
    labels: list = None
    n_eca: int = 0


@dataclass
class ControlOutput:
    tau: np.ndarray
    delta: float
    status: str  # optimal | fallback_braking | clamped
    active_set: list
    passivity_residual: float = float("nan")
    iterations: int = 0


def build_qp(
    model: RobotModel,
    state: JointState,
    F_c: np.ndarray,
    gates: Gates,
    params: QpParams | None = None,
    terms=None,
    W: np.ndarray | None = None,
) -> TorqueQP:
    """Assemble the torque QP rows from the gated constraint snapshot."""
    params = params or QpParams()
    if terms is None:
        terms = dynamics_terms(model, state)
    Minv = np.linalg.inv(terms.M)
    hbias = terms.C @ state.qd + terms.G
    if W is None:
        W = damped_pinv_transpose(jacobian(model, state.q), params.sigma)

    n = model.n
    box = gates.accel_box
    rows, rhs, labels = [], [], []
    bias_acc = Minv @ hbias
    for i in range(n):
        rows.append(Minv[i])
        rhs.append(box.qdd_ub[i] + bias_acc[i])
        labels.append(("acc_ub", i))
        rows.append(-Minv[i])
        rhs.append(-(box.qdd_lb[i] + bias_acc[i]))
        labels.append(("acc_lb", i))
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        rows.append(e)
        rhs.append(model.tau_max[i])
        labels.append(("tau_ub", i))
        rows.append(-e)
        rhs.append(-model.tau_min[i])
        labels.append(("tau_lb", i))
    for j, hs in enumerate(gates.sca):
        gM = hs.g @ Minv
        rows.append(-gM)
        rhs.append(-(gM @ hbias - hs.b))
        labels.append(("sca", j))
    eca_rows = []
    for j, hs in enumerate(gates.eca):
        gM = hs.g @ Minv
        eca_rows.append((-gM, -(gM @ hbias - hs.b), ("eca", j)))

    n_eca = len(eca_rows)
    if n_eca:
        G_rows = np.zeros((len(rows) + n_eca + 1, n + 1))
        G_rows[: len(rows), :n] = np.array(rows)
        h_vec = list(rhs)
        for k, (g_row, b_row, lab) in enumerate(eca_rows):
            G_rows[len(rows) + k, :n] = g_row
            G_rows[len(rows) + k, n] = -1.0  # slack relaxes the row
            h_vec.append(b_row)
            labels.append(lab)
        G_rows[-1, n] = -1.0  # delta >= 0
        h_vec.append(0.0)
        labels.append(("slack", 0))
        h_vec = np.array(h_vec)
    else:
        G_rows = np.array(rows)
        h_vec = np.array(rhs)

    return TorqueQP(
        Jhat_T=W,
        F_c=np.asarray(F_c, dtype=float),
        alpha1=params.alpha1,
        alpha2=params.alpha2,
        sigma=params.sigma,
        accel_box=box,
        halfspaces=list(gates.sca) + list(gates.eca),
        tau_min=model.tau_min,
        tau_max=model.tau_max,
        M=terms.M,
        C=terms.C,
        G=terms.G,
        qd=state.qd.copy(),
        G_rows=G_rows,
        h_vec=h_vec,
        labels=labels,
        n_eca=n_eca,
    )


def _kkt_step(H, G_act, grad, min_norm: bool):
    """Equality-constrained step: min 0.5 p'Hp + grad'p s.t. G_act p = 0.

    With a rank-deficient H the plain solve can return exact-but-unbounded
    null-space components, so degenerate problems take the min-norm
    least-squares path for every step.
    """
    nz = H.shape[0]
    na = G_act.shape[0]
    K = np.zeros((nz + na, nz + na))
    K[:nz, :nz] = H
    K[:nz, nz:] = G_act.T
    K[nz:, :nz] = G_act
    r = np.concatenate([-grad, np.zeros(na)])
    if min_norm:
        sol = np.linalg.lstsq(K, r, rcond=None)[0]
        return sol[:nz], sol[nz:]
    try:
        sol = np.linalg.solve(K, r)
        resid = np.linalg.norm(K @ sol - r, np.inf)
        if not np.all(np.isfinite(sol)) or resid > 1e-8 * max(1.0, np.linalg.norm(r, np.inf)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, r, rcond=None)[0]
    return sol[:nz], sol[nz:]


def solve_dense_qp(H, c, G, h, z0, max_iter: int = 200, tol: float = 1e-10):
    """Primal active-set method for min 0.5 z'Hz + c'z s.t. Gz <= h.

    Requires a feasible z0. H only needs to be positive semidefinite as long
    as the objective is bounded on the feasible set: degenerate KKT steps use
    the min-norm least-squares solution.
    """
    H = np.asarray(H, dtype=float)
    z = np.asarray(z0, dtype=float).copy()
    m = G.shape[0] if G.size else 0
    ew = np.linalg.eigvalsh(H)
    degenerate = ew[0] < 1e-10 * max(ew[-1], 1.0)

    active = [i for i in range(m) if G[i] @ z - h[i] > -1e-11]
    lam_full = np.zeros(m)
    for it in range(max_iter):
        G_act = G[active] if active else np.zeros((0, z.size))
        grad = H @ z + c
        p, lam = _kkt_step(H, G_act, grad, degenerate)
        at_subspace_optimum = np.linalg.norm(p, np.inf) <= tol * (1.0 + np.linalg.norm(z, np.inf))
        if not at_subspace_optimum:
            alpha = 1.0
            blocking = -1
            for i in range(m):
                if i in active:
                    continue
                gp = G[i] @ p
                if gp > 1e-12:
                    a_i = (h[i] - G[i] @ z) / gp
                    if a_i < alpha:
                        alpha = max(a_i, 0.0)
                        blocking = i
            z = z + alpha * p
            if blocking >= 0:
                active.append(blocking)
                continue
            # a full unblocked step lands exactly on the working-set optimum,
            # where the multipliers just computed are the valid ones; testing
            # them now avoids spinning on solve noise near-dependent rows make
            at_subspace_optimum = True
        lam_full[:] = 0.0
        for idx, row in enumerate(active):
            lam_full[row] = lam[idx]
        if not active or np.min(lam) >= -1e-9:
            if degenerate:
                # the iterate may carry the start's null-space component;
                # take the min-norm point over the final active set when
                # it stays feasible (equal objective by construction)
                nz = z.size
                na = len(active)
                G_act = G[active] if active else np.zeros((0, z.size))
                K = np.zeros((nz + na, nz + na))
                K[:nz, :nz] = H
                K[:nz, nz:] = G_act.T
                K[nz:, :nz] = G_act
                r = np.concatenate([-c, h[active]])
                sol = np.linalg.lstsq(K, r, rcond=None)[0]
                z_mn = sol[:nz]
                if m == 0 or np.all(G @ z_mn <= h + 1e-10):
                    z = z_mn
            return z, lam_full, list(active), "optimal", it + 1
        drop = active[int(np.argmin(lam))]
        active.remove(drop)
    lam_full[:] = 0.0
    return z, lam_full, list(active), "iteration_limit", max_iter


def kkt_residuals(H, c, G, h, z, lam):
    """Relative (primal, stationarity, complementarity) residuals.

    Normalized by the iterate and multiplier scales so the tolerances stay
    meaningful when a heavily penalized slack drives huge multipliers.
    """
    z_scale = 1.0 + float(np.linalg.norm(z, np.inf))
    lam_scale = 1.0 + float(np.linalg.norm(lam, np.inf)) if lam.size else 1.0
    primal = float(np.max(G @ z - h, initial=0.0)) / (z_scale * lam_scale)
    stat = float(np.linalg.norm(H @ z + c + G.T @ lam, np.inf)) / (z_scale * lam_scale)
    comp = float(np.max(np.abs(lam * (G @ z - h)), initial=0.0)) / (z_scale * lam_scale)
    return max(primal, 0.0), stat, comp


def _phase_one(G, h, candidates):
    """Feasible point for Gz <= h: try candidates, then a small LP."""
    for z in candidates:
        if z is not None and np.all(G @ z <= h + FEAS_TOL):
            return np.asarray(z, dtype=float).copy()
    from scipy.optimize import linprog

    nz = G.shape[1]
    res = linprog(
        c=np.r_[np.zeros(nz), 1.0],
        A_ub=np.c_[G, -np.ones(G.shape[0])],
        b_ub=h,
        bounds=[(None, None)] * nz + [(-1.0, None)],
        method="highs",
    )
    if res.status == 0 and res.x[-1] <= FEAS_TOL:
        return res.x[:nz]
    return None


def braking_fallback_tau(
    model: RobotModel, state: JointState, box: ViableAccelBox, dt: float, terms=None
):
    """Per-joint braking torque, clamped into the accel box and torque limits."""
    if terms is None:
        terms = dynamics_terms(model, state)
    a = braking_witness_accel(model, state, dt)
    a = np.where(box.feasible, np.clip(a, box.qdd_lb, box.qdd_ub), a)
    tau = terms.M @ a + terms.C @ state.qd + terms.G
    return np.clip(tau, model.tau_min, model.tau_max)


def solve_qp(
    qp: TorqueQP,
    model: RobotModel,
    state: JointState,
    dt: float,
    warm: Optional[np.ndarray] = None,
    params: QpParams | None = None,
    check_kkt: bool = False,
) -> ControlOutput:
    """Solve the assembled QP with the infeasibility ladder.

    Ladder: full problem -> drop the (slacked) ECA rows -> per-joint braking
    torque. Joint-limit and SCA rows are never dropped.
    """
    params = params or QpParams()
    n = model.n
    from .dynamics import DynamicsTerms

    terms = DynamicsTerms(M=qp.M, C=qp.C, G=qp.G)
    if not qp.accel_box.all_feasible:
        tau = braking_fallback_tau(model, state, qp.accel_box, dt, terms)
        return ControlOutput(tau=tau, delta=0.0, status="fallback_braking", active_set=["box_infeasible"])

    has_slack = qp.n_eca > 0
    nz = n + 1 if has_slack else n
    W = qp.Jhat_T
    H = np.zeros((nz, nz))
    H[:n, :n] = W.T @ W + 2.0 * qp.alpha1 * np.eye(n)
    c = np.zeros(nz)
    c[:n] = -(W.T @ qp.F_c)
    G_all = qp.G_rows
    if has_slack:
        # the slack variable is solved in units of SLACK_SCALE to keep the
        # Hessian conditioned despite the heavy penalty
        H[n, n] = 2.0 * qp.alpha2 * SLACK_SCALE**2
        c[n] = params.alpha3 * SLACK_SCALE
        G_all = qp.G_rows.copy()
        G_all[:, n] *= SLACK_SCALE

    hard_mask = np.array([lab[0] != "eca" and lab[0] != "slack" for lab in qp.labels])
    G_hard = G_all[hard_mask][:, :n]
    h_hard = qp.h_vec[hard_mask]

    tau_brake = braking_fallback_tau(model, state, qp.accel_box, dt, terms)
    candidates = [warm[:n] if warm is not None and warm.size >= n else None, tau_brake]
    tau0 = _phase_one(G_hard, h_hard, candidates)
    if tau0 is None:
        return ControlOutput(
            tau=tau_brake, delta=0.0, status="fallback_braking", active_set=["hard_infeasible"]
        )

    if has_slack:
        z0 = np.zeros(nz)
        z0[:n] = tau0
        eca_mask = np.array([lab[0] == "eca" for lab in qp.labels])
        viol = G_all[eca_mask][:, :n] @ tau0 - qp.h_vec[eca_mask]
        z0[n] = max(float(np.max(viol, initial=0.0)) / SLACK_SCALE + 1e-9, 0.0)
        if warm is not None and warm.size == nz:
            w = warm.copy()
            w[n] /= SLACK_SCALE
            if np.all(G_all @ w <= qp.h_vec + FEAS_TOL):
                z0 = w
    else:
        z0 = tau0

    z, lam, active_idx, status, iters = solve_dense_qp(
        H, c, G_all, qp.h_vec, z0, max_iter=params.max_iter
    )
    if status != "optimal" and has_slack:
        # retry with the soft rows removed; their slack makes them redundant
        # for feasibility but they can still stall the iteration
        z2, lam2, active2, status2, it2 = solve_dense_qp(
            H[:n, :n], c[:n], G_hard, h_hard, tau0, max_iter=params.max_iter
        )
        if status2 == "optimal":
            z = np.r_[z2, 0.0] if has_slack else z2
            lam = np.zeros(qp.G_rows.shape[0])
            active_idx = [int(np.flatnonzero(hard_mask)[i]) for i in active2]
            status, iters = "optimal", iters + it2
    if status != "optimal":
        return ControlOutput(
            tau=tau_brake, delta=0.0, status="fallback_braking", active_set=["iteration_limit"]
        )

    if check_kkt:
        primal, stat, comp = kkt_residuals(H, c, G_all, qp.h_vec, z, lam)
        if primal > FEAS_TOL or stat > KKT_TOL or comp > KKT_TOL:
            raise AssertionError(f"KKT residuals out of tolerance: {primal}, {stat}, {comp}")

    tau = z[:n]
    delta = float(z[n]) * SLACK_SCALE if has_slack else 0.0
    clipped = np.clip(tau, model.tau_min, model.tau_max)
    out_status = "optimal" if np.max(np.abs(clipped - tau)) <= 1e-12 else "clamped"
    return ControlOutput(
        tau=clipped,
        delta=delta,
        status=out_status,
        active_set=[qp.labels[i] for i in active_idx],
        iterations=iters,
    )


def closed_form_single_constraint(F_c, J, a, b: float) -> np.ndarray:
    """Minimizer of 0.5 || J^-T tau - F_c ||^2 s.t. a . tau <= b (J full row rank)."""
    J = np.asarray(J, dtype=float)
    a = np.asarray(a, dtype=float).reshape(-1)
    F_c = np.asarray(F_c, dtype=float).reshape(J.shape[0])
    tau_free = J.T @ F_c
    val = float(a @ tau_free)
    if val <= b:
        return tau_free
    Ja = J @ a
    denom = float(Ja @ Ja)
    if denom <= 1e-14:
        raise ValueError("constraint invisible to objective (a in null space of J)")
    return tau_free - ((val - b) / denom) * (J.T @ Ja)


def equivalent_task_force(F_c, J, a, b: float):
    """Task-space force equivalent of the active single-constraint solution.

    Returns (F_star, A_bar); A_bar is the orthogonal projector onto the
    complement of span(J a).
    """
    J = np.asarray(J, dtype=float)
    a = np.asarray(a, dtype=float).reshape(-1)
    F_c = np.asarray(F_c, dtype=float).reshape(J.shape[0])
    Ja = J @ a
    denom = float(Ja @ Ja)
    if denom <= 1e-14:
        raise ValueError("J a vanishes; no task-space direction to project out")
    A_bar = np.eye(J.shape[0]) - np.outer(Ja, Ja) / denom
    F_star = A_bar @ F_c + (b / denom) * Ja
    return F_star, A_bar


class PassivityMonitor:
    """Discrete storage-rate monitor S = 0.5 xd' M_x xd + lambda1 * potential."""

    def __init__(
        self,
        field: AttractorField,
        lambda1: float = 1.0,
        dt: float = 0.005,
        tol_power: float = 1e-3,
        sigma: float = 0.05,
    ):
        self.field = field
        self.lambda1 = lambda1
        self.dt = dt
        self.tol_power = tol_power
        self.sigma = sigma
        self._prev_storage: Optional[float] = None
        self._prev_ext_power: float = 0.0

    def storage(self, model: RobotModel, state: JointState) -> float:
        J = jacobian(model, state.q)
        W = damped_pinv_transpose(J, self.sigma)
        M = dynamics_terms(model, state).M
        Mx = W @ M @ W.T
        xd = J @ state.qd
        from .dynamics import forward_kinematics

        x = forward_kinematics(model, state.q)
        return float(0.5 * xd @ Mx @ xd + self.lambda1 * potential(self.field, x))

    def step(self, model: RobotModel, state: JointState, applied_task_force, f_ext_task):
        """Residual Sdot - xd . f_ext over the last control period."""
        J = jacobian(model, state.q)
        xd = J @ state.qd
        ext_power = float(xd @ np.asarray(f_ext_task, dtype=float))
        s = self.storage(model, state)
        if self._prev_storage is None:
            self._prev_storage = s
            self._prev_ext_power = ext_power
            return 0.0, True
        sdot = (s - self._prev_storage) / self.dt
        residual = sdot - 0.5 * (ext_power + self._prev_ext_power)
        self._prev_storage = s
        self._prev_ext_power = ext_power
        return residual, residual <= self.tol_power

    def reset(self):
        self._prev_storage = None
        self._prev_ext_power = 0.0
