"""Rigid-body terms, forward kinematics and Jacobians for the planar chain.

Everything here is a pure function of (model, state); the Coriolis matrix is
built from Christoffel symbols so that Mdot - 2C stays skew-symmetric.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import JointState, RobotModel

PINV_EPS = 1e-8  # ridge applied inside (J J^T)^-1 to keep the damped map total


@dataclass(frozen=True)
class DynamicsTerms:
    M: np.ndarray  # n x n inertia matrix
    C: np.ndarray  # n x n Coriolis matrix (Christoffel convention)
    G: np.ndarray  # n gravity torque


def _angles(model: RobotModel, q: np.ndarray) -> np.ndarray:
    return np.cumsum(q)


def link_frames(model: RobotModel, q, base=(0.0, 0.0)):
    """Joint origins (n+1 x 2, last row = end effector) and cumulative angles."""
    q = np.asarray(q, dtype=float).reshape(-1)
    theta = _angles(model, q)
    axes = np.stack([np.cos(theta), np.sin(theta)], axis=1)  # unit vector of each link
    pts = np.zeros((model.n + 1, 2))
    pts[0] = np.asarray(base, dtype=float)
    pts[1:] = pts[0] + np.cumsum(model.link_lengths[:, None] * axes, axis=0)
    return pts, theta


def forward_kinematics(model: RobotModel, q) -> np.ndarray:
    """End-effector position by the cumulative-angle chain."""
    pts, _ = link_frames(model, q)
    return pts[-1]


def _unit_and_normal(theta: np.ndarray):
    e = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    en = np.stack([-np.sin(theta), np.cos(theta)], axis=1)
    return e, en


def jacobian(model: RobotModel, q) -> np.ndarray:
    """2 x n end-effector Jacobian d(fk)/dq."""
    q = np.asarray(q, dtype=float).reshape(-1)
    theta = _angles(model, q)
    _, en = _unit_and_normal(theta)
    w = model.link_lengths[:, None] * en  # L_j * d(e_j)/d(theta_j)
    # column k sums contributions of links j >= k
    suffix = np.cumsum(w[::-1], axis=0)[::-1]  # suffix[j] = sum_{i>=j} w[i]
    return suffix.T.copy()


def joint_point_jacobians(model: RobotModel, q) -> np.ndarray:
    """(n+1) x 2 x n Jacobians of each joint origin (row n = end effector)."""
    q = np.asarray(q, dtype=float).reshape(-1)
    n = model.n
    theta = _angles(model, q)
    _, en = _unit_and_normal(theta)
    w = model.link_lengths[:, None] * en
    prefix = np.zeros((n + 1, 2))
    prefix[1:] = np.cumsum(w, axis=0)  # prefix[m] = sum_{j<m} w[j]
    J = np.zeros((n + 1, 2, n))
    for i in range(n + 1):
        for k in range(i):
            J[i, :, k] = prefix[i] - prefix[k]
    return J


def com_jacobians(model: RobotModel, q):
    """Per-link COM positions (n x 2) and COM Jacobians (n x 2 x n)."""
    q = np.asarray(q, dtype=float).reshape(-1)
    n = model.n
    theta = _angles(model, q)
    e, en = _unit_and_normal(theta)
    pts, _ = link_frames(model, q)
    coms = pts[:n] + model.link_com_offsets[:, None] * e
    Jp = joint_point_jacobians(model, q)
    Jc = np.zeros((n, 2, n))
    for i in range(n):
        Jc[i] = Jp[i]
        Jc[i, :, : i + 1] += model.link_com_offsets[i] * en[i][:, None]
    return coms, Jc


def _mass_matrix_and_partials(model: RobotModel, q: np.ndarray):
    """M(q) and the tensor T[r, i, j] = dM_ij/dq_r (exact)."""
    n = model.n
    theta = _angles(model, q)
    e, en = _unit_and_normal(theta)
    w1 = model.link_lengths[:, None] * en  # d p / d theta terms
    w2 = -model.link_lengths[:, None] * e  # second derivative terms
    pre1 = np.zeros((n + 1, 2))
    pre1[1:] = np.cumsum(w1, axis=0)
    pre2 = np.zeros((n + 1, 2))
    pre2[1:] = np.cumsum(w2, axis=0)

    # COM Jacobians and their exact partials w.r.t. each joint
    Jc = np.zeros((n, 2, n))
    dJc = np.zeros((n, n, 2, n))  # [link, d/dq_r, :, col]
    for i in range(n):
        ci = model.link_com_offsets[i]
        for k in range(i + 1):
            Jc[i, :, k] = (pre1[i] - pre1[k]) + ci * en[i]
            for r in range(i + 1):
                m = max(k, r)
                dJc[i, r, :, k] = (pre2[i] - pre2[m]) - ci * e[i]
    M = np.zeros((n, n))
    T = np.zeros((n, n, n))
    for i in range(n):
        mi = model.link_masses[i]
        M += mi * (Jc[i].T @ Jc[i])
        M[: i + 1, : i + 1] += model.link_inertias[i]
        for r in range(i + 1):
            dJ = dJc[i, r]
            T[r] += mi * (dJ.T @ Jc[i] + Jc[i].T @ dJ)
    return M, T


def dynamics_terms(model: RobotModel, state: JointState) -> DynamicsTerms:
    """Inertia, Coriolis (Christoffel) and gravity terms at the given state."""
    if state.n != model.n:
        raise ValueError("state dimension does not match model")
    q, qd = state.q, state.qd
    M, T = _mass_matrix_and_partials(model, q)
    n = model.n
    # c_ijk = 0.5 (dM_ij/dq_k + dM_ik/dq_j - dM_jk/dq_i); C_ij = sum_k c_ijk qd_k
    C = 0.5 * (
        np.einsum("kij,k->ij", T, qd)
        + np.einsum("jik,k->ij", T, qd)
        - np.einsum("ijk,k->ij", T, qd)
    )
    _, Jc = com_jacobians(model, q)
    G = np.zeros(n)
    for i in range(n):
        G -= model.link_masses[i] * (Jc[i].T @ model.gravity)
    return DynamicsTerms(M=M, C=C, G=G)


def mass_matrix(model: RobotModel, q) -> np.ndarray:
    M, _ = _mass_matrix_and_partials(model, np.asarray(q, dtype=float).reshape(-1))
    return M


def damped_pinv_transpose(J: np.ndarray, sigma: float) -> np.ndarray:
    """Singularity-robust torque -> task-force map ((J J^T)^-1 + sigma^2 I) J.

    Returned as a 2 x n matrix W with task force = W @ tau.
    """
    J = np.asarray(J, dtype=float)
    JJt = J @ J.T
    if sigma == 0.0 and np.linalg.matrix_rank(JJt, tol=1e-12) < JJt.shape[0]:
        raise np.linalg.LinAlgError("singular task inertia")
    inv = np.linalg.inv(JJt + PINV_EPS * np.eye(JJt.shape[0]))
    return (inv + sigma**2 * np.eye(JJt.shape[0])) @ J


def forward_dynamics(model: RobotModel, state: JointState, tau_c, tau_ext=None) -> np.ndarray:
    """Joint accelerations qdd = M^-1 (tau_c + tau_ext - C qd - G)."""
    terms = dynamics_terms(model, state)
    rhs = np.asarray(tau_c, dtype=float).reshape(-1) - terms.C @ state.qd - terms.G
    if tau_ext is not None:
        rhs = rhs + np.asarray(tau_ext, dtype=float).reshape(-1)
    return np.linalg.solve(terms.M, rhs)


def kinetic_energy(model: RobotModel, state: JointState) -> float:
    M, _ = _mass_matrix_and_partials(model, state.q)
    return 0.5 * float(state.qd @ M @ state.qd)


def physics_step(model: RobotModel, state: JointState, tau_c, tau_ext, dt: float) -> JointState:
    """One semi-implicit Euler step of the rigid-body dynamics with held torque."""
    qdd = forward_dynamics(model, state, tau_c, tau_ext)
    qd = state.qd + dt * qdd
    q = state.q + dt * qd
    return JointState(q=q, qd=qd)
