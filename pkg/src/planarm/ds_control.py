"""Task-space attractor field and the passive velocity-error damping force."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import damped_pinv_transpose, dynamics_terms, jacobian
from .model import JointState, RobotModel


@dataclass(frozen=True)
class AttractorField:
    """Quadratic attractor: velocity field f(x) = 2 P (x - x_star), P < 0."""

    x_star: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x_star, dtype=float).reshape(2)
        P = np.asarray(self.P, dtype=float).reshape(2, 2)
        if np.max(np.abs(P - P.T)) > 1e-12:
            raise ValueError("P must be symmetric")
        if np.max(np.linalg.eigvalsh(P)) >= 0:
            raise ValueError("P must be negative definite")
        object.__setattr__(self, "x_star", x)
        object.__setattr__(self, "P", P)


@dataclass(frozen=True)
class DampingSpec:
    """Anisotropic damping gains: lambda1 along f(x), lambda2 orthogonal."""

    lambda1: float = 40.0
    lambda2: float = 20.0
    eta_f: float = 1e-4  # below this field speed the frame is ill-defined

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("damping gains must be nonnegative")
        if self.eta_f <= 0:
            raise ValueError("eta_f must be positive")


def ds_velocity(field: AttractorField, x) -> np.ndarray:
    """Desired task velocity f(x) = 2 P (x - x_star)."""
    return 2.0 * field.P @ (np.asarray(x, dtype=float) - field.x_star)


def potential(field: AttractorField, x) -> float:
    """Scalar potential with f = -grad: (x - x*)^T (-P) (x - x*), >= 0."""
    d = np.asarray(x, dtype=float) - field.x_star
    return float(d @ (-field.P) @ d)


def damping_matrix(field: AttractorField, spec: DampingSpec, x) -> np.ndarray:
    """PSD damping D = V diag(lambda1, lambda2) V^T with v1 along f(x)."""
    f = ds_velocity(field, x)
    nf = np.linalg.norm(f)
    if nf < spec.eta_f:
        return spec.lambda2 * np.eye(2)
    v1 = f / nf
    v2 = np.array([-v1[1], v1[0]])
    V = np.stack([v1, v2], axis=1)
    return V @ np.diag([spec.lambda1, spec.lambda2]) @ V.T


def passive_force(
    model: RobotModel,
    state: JointState,
    field: AttractorField,
    spec: DampingSpec,
    sigma: float = 0.05,
) -> np.ndarray:
    """Velocity-based impedance force F_c = G_x(x) - D(x) (xdot - f(x))."""
    from .dynamics import forward_kinematics

    J = jacobian(model, state.q)
    x = forward_kinematics(model, state.q)
    xd = J @ state.qd
    G = dynamics_terms(model, state).G
    W = damped_pinv_transpose(J, sigma)
    Gx = W @ G
    D = damping_matrix(field, spec, x)
    return Gx - D @ (xd - ds_velocity(field, x))
