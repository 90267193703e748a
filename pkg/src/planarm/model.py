"""Robot description and joint-space state for a planar revolute serial chain."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


def _vec(x, n: int, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(-1)
    if v.size != n:
        raise ValueError(f"{name} must have {n} entries, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite")
    return v


@dataclass(frozen=True)
class RobotModel:
    """Kinematic, dynamic and limit description of a planar n-link chain.

    Links are capsules (segment + radius). Uniform-rod defaults for the
    center of mass (l/2) and inertia (m*l^2/12) are applied when the
    corresponding fields are omitted.
    """

    link_lengths: np.ndarray
    link_masses: np.ndarray
    link_com_offsets: np.ndarray
    link_inertias: np.ndarray
    link_radii: np.ndarray
    gravity: np.ndarray
    q_lower: np.ndarray
    q_upper: np.ndarray
    qd_max: np.ndarray
    qdd_max: np.ndarray
    tau_min: np.ndarray
    tau_max: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.link_lengths).size
        object.__setattr__(self, "link_lengths", _vec(self.link_lengths, n, "link_lengths"))
        object.__setattr__(self, "link_masses", _vec(self.link_masses, n, "link_masses"))
        object.__setattr__(self, "link_com_offsets", _vec(self.link_com_offsets, n, "link_com_offsets"))
        object.__setattr__(self, "link_inertias", _vec(self.link_inertias, n, "link_inertias"))
        object.__setattr__(self, "link_radii", _vec(self.link_radii, n, "link_radii"))
        object.__setattr__(self, "gravity", _vec(self.gravity, 2, "gravity"))
        for name in ("q_lower", "q_upper", "qd_max", "qdd_max", "tau_min", "tau_max"):
            object.__setattr__(self, name, _vec(getattr(self, name), n, name))
        if not np.all(self.q_lower < self.q_upper):
            raise ValueError("q_lower must be < q_upper elementwise")
        if not np.all(self.tau_min < self.tau_max):
            raise ValueError("tau_min must be < tau_max elementwise")
        for name in ("link_lengths", "link_masses", "link_inertias", "link_radii", "qd_max", "qdd_max"):
            if not np.all(getattr(self, name) > 0):
                raise ValueError(f"{name} must be strictly positive")
        if not np.all(self.link_com_offsets > 0):
            raise ValueError("link_com_offsets must be strictly positive")

    @property
    def n(self) -> int:
        return self.link_lengths.size

    def with_limits(self, *, q_lower=None, q_upper=None, qd_max=None, qdd_max=None) -> "RobotModel":
        """Copy with some limits replaced (used for discretization guards)."""
        kw = {}
        if q_lower is not None:
            kw["q_lower"] = q_lower
        if q_upper is not None:
            kw["q_upper"] = q_upper
        if qd_max is not None:
            kw["qd_max"] = qd_max
        if qdd_max is not None:
            kw["qdd_max"] = qdd_max
        return replace(self, **kw)


@dataclass(frozen=True)
class JointState:
    """Augmented joint state (q, qd) that all viability reasoning operates on."""

    q: np.ndarray
    qd: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(-1)
        qd = np.asarray(self.qd, dtype=float).reshape(-1)
        if q.size != qd.size:
            raise ValueError("q and qd must have the same dimension")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
            raise ValueError("joint state must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qd", qd)

    @property
    def n(self) -> int:
        return self.q.size


def make_model(
    link_lengths,
    link_masses,
    *,
    link_com_offsets=None,
    link_inertias=None,
    link_radii=None,
    gravity=(0.0, -9.81),
    q_lower=None,
    q_upper=None,
    qd_max=None,
    qdd_max=None,
    tau_min=None,
    tau_max=None,
) -> RobotModel:
    """Build a RobotModel with uniform-rod defaults for unspecified fields."""
    lengths = np.asarray(link_lengths, dtype=float)
    masses = np.asarray(link_masses, dtype=float)
    n = lengths.size
    if link_com_offsets is None:
        link_com_offsets = lengths / 2.0
    if link_inertias is None:
        link_inertias = masses * lengths**2 / 12.0
    if link_radii is None:
        link_radii = np.full(n, 0.04)
    if q_lower is None:
        q_lower = np.full(n, -np.pi)
    if q_upper is None:
        q_upper = np.full(n, np.pi)
    if qd_max is None:
        qd_max = np.full(n, 2.5)
    if qdd_max is None:
        qdd_max = np.full(n, 10.0)
    if tau_max is None:
        tau_max = np.full(n, 80.0)
    if tau_min is None:
        tau_min = -np.asarray(tau_max, dtype=float)
    return RobotModel(
        link_lengths=lengths,
        link_masses=masses,
        link_com_offsets=link_com_offsets,
        link_inertias=link_inertias,
        link_radii=link_radii,
        gravity=gravity,
        q_lower=q_lower,
        q_upper=q_upper,
        qd_max=qd_max,
        qdd_max=qdd_max,
        tau_min=tau_min,
        tau_max=tau_max,
    )


def desk_model() -> RobotModel:
    """Default 3-DoF desk-scale planar chain used by the demo scenarios."""
    return make_model(
        link_lengths=[0.4, 0.35, 0.25],
        link_masses=[2.0, 1.5, 1.0],
        link_radii=[0.04, 0.04, 0.04],
        q_lower=[-3.0, -2.9, -2.9],
        q_upper=[3.0, 2.9, 2.9],
        qd_max=[2.5, 2.5, 2.5],
        qdd_max=[10.0, 10.0, 10.0],
        tau_max=[80.0, 40.0, 15.0],
    )
