"""Bernstein-polynomial link SDFs, whole-body soft-min and braking distance."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import binom

from .geometry import capsule_sdf
from .model import JointState, RobotModel
from .viability import HalfSpace, braking_rollout

SDF_MAGIC = b"BSDF"
SET_MAGIC = b"BSDS"
DEFAULT_BETA = 80.0  # soft-min sharpness, bounds the gap by log(N)/beta
DEFAULT_SV_CAP = 120  # rollout samples beyond this are subsampled uniformly


_BINOM_CACHE: dict = {}


def _binom_row(count: int) -> np.ndarray:
    row = _BINOM_CACHE.get(count)
    if row is None:
        row = binom(count - 1, np.arange(count))
        _BINOM_CACHE[count] = row
    return row


def bernstein_basis(u, count: int) -> np.ndarray:
    """Basis matrix B[..., i] of `count` Bernstein polynomials on [0, 1]."""
    u_arr = np.asarray(u, dtype=float)
    flat = np.ascontiguousarray(u_arr.reshape(-1))
    # powers by cumulative products on unit strides; float pow dominates
    # the runtime otherwise
    pw = np.empty((flat.size, count))
    qw = np.empty((flat.size, count))
    pw[:, 0] = 1.0
    qw[:, count - 1] = 1.0
    v = 1.0 - flat
    for k in range(1, count):
        pw[:, k] = pw[:, k - 1] * flat
        qw[:, count - 1 - k] = qw[:, count - k] * v
    out = _binom_row(count) * pw * qw
    return out.reshape(u_arr.shape + (count,))


def bernstein_basis_deriv(u, count: int) -> np.ndarray:
    """Derivatives dB_i/du via the degree-reduction identity."""
    u = np.asarray(u, dtype=float)
    d = count - 1
    if d == 0:
        return np.zeros(u.shape + (1,))
    lower = bernstein_basis(u, count - 1)
    out = np.zeros(u.shape + (count,))
    out[..., :-1] -= d * lower
    out[..., 1:] += d * lower
    return out


@dataclass
class BernsteinSdf:
    """Tensor-product Bernstein fit of one link's signed distance field."""

    coeffs: np.ndarray  # (degree,) * dim tensor
    domain_lo: np.ndarray
    domain_hi: np.ndarray
    ridge_lambda: float
    fit_rmse: float

    @property
    def degree(self) -> int:
        return self.coeffs.shape[0]

    @property
    def dim(self) -> int:
        return self.coeffs.ndim

    def _normalize(self, p):
        span = self.domain_hi - self.domain_lo
        return (np.asarray(p, dtype=float) - self.domain_lo) / span

    def evaluate(self, p, with_grad: bool = False):
        """SDF value at points p (..., dim) in the link frame.

        Points outside the domain box are projected onto the boundary and the
        Euclidean remainder is added; the returned mask marks them.
        """
        p = np.asarray(p, dtype=float)
        clipped = np.clip(p, self.domain_lo, self.domain_hi)
        resid = p - clipped
        resid_norm = np.linalg.norm(resid, axis=-1)
        outside = resid_norm > 0.0
        u = self._normalize(clipped)
        d = self.degree
        bases = [bernstein_basis(u[..., k], d) for k in range(self.dim)]
        bxc = bases[0] @ self.coeffs  # (..., degree) contracted on axis 0
        val = np.sum(bxc * bases[1], axis=-1) + resid_norm
        if not with_grad:
            return val, outside
        span = self.domain_hi - self.domain_lo
        dbases = [bernstein_basis_deriv(u[..., k], d) for k in range(self.dim)]
        gx = np.sum((dbases[0] @ self.coeffs) * bases[1], axis=-1) / span[0]
        gy = np.sum(bxc * dbases[1], axis=-1) / span[1]
        grad = np.stack([gx, gy], axis=-1)
        # clipped coordinates contribute through the remainder term instead
        clip_mask = (p > self.domain_lo) & (p < self.domain_hi)
        safe = np.where(resid_norm[..., None] > 0, resid_norm[..., None], 1.0)
        grad = np.where(clip_mask, grad, resid / safe)
        return val, grad, outside


def fit_link_sdf(
    length: float,
    radius: float,
    degree: int = 12,
    ridge_lambda: float = 1e-8,
    sample_count: int = 20_000,
    seed: int = 0,
    pad: float = 0.1,
    batch_size: int = 4096,
) -> BernsteinSdf:
    """Fit one capsule link by mini-batch recursive ridge least squares.

    Targets are the analytic capsule SDF; sample points land in a slightly
    inflated box and are projected back onto the boundary, which concentrates
    part of the sample mass there.
    """
    if degree < 2:
        raise ValueError("degree must be >= 2")
    n_coef = degree**2
    if sample_count < 10 * n_coef:
        raise ValueError(f"sample_count must be >= {10 * n_coef} for degree {degree}")
    lo = np.array([-(radius + pad), -(radius + pad)])
    hi = np.array([length + radius + pad, radius + pad])
    rng = np.random.default_rng(seed)
    span = hi - lo
    pts = rng.uniform(lo - 0.1 * span, hi + 0.1 * span, size=(sample_count, 2))
    pts = np.clip(pts, lo, hi)
    targets = capsule_sdf(pts, length, radius)

    A = ridge_lambda * np.eye(n_coef)
    rhs = np.zeros(n_coef)
    u = (pts - lo) / span
    for start in range(0, sample_count, batch_size):
        sl = slice(start, min(start + batch_size, sample_count))
        bx = bernstein_basis(u[sl, 0], degree)
        by = bernstein_basis(u[sl, 1], degree)
        phi = np.einsum("ni,nj->nij", bx, by).reshape(sl.stop - sl.start, n_coef)
        A += phi.T @ phi
        rhs += phi.T @ targets[sl]
    if ridge_lambda == 0.0:
        cond = np.linalg.cond(A)
        if cond > 1e12:
            raise np.linalg.LinAlgError(
                f"normal equations ill-conditioned (cond ~ {cond:.2e}); use ridge_lambda > 0"
            )
    coeffs = np.linalg.solve(A, rhs).reshape(degree, degree)
    sdf = BernsteinSdf(
        coeffs=coeffs, domain_lo=lo, domain_hi=hi, ridge_lambda=ridge_lambda, fit_rmse=0.0
    )
    vals, _ = sdf.evaluate(pts)
    sdf.fit_rmse = float(np.sqrt(np.mean((vals - targets) ** 2)))
    return sdf


def fit_robot_sdfs(model: RobotModel, degree: int = 12, seed: int = 0, **kw) -> list:
    return [
        fit_link_sdf(model.link_lengths[i], model.link_radii[i], degree=degree, seed=seed + i, **kw)
        for i in range(model.n)
    ]


def softmin(values: np.ndarray, beta: float, axis=-1):
    """Stable log-sum-exp soft minimum and its weights along an axis."""
    v = np.asarray(values, dtype=float)
    m = v.min(axis=axis, keepdims=True)
    ex = np.exp(-beta * (v - m))
    s = ex.sum(axis=axis, keepdims=True)
    out = (m - np.log(s) / beta).squeeze(axis)
    return out, ex / s


class WholeBodySdf(NamedTuple):
    value: float
    d_p: np.ndarray
    d_q: np.ndarray
    outside: bool  # query left every link's domain box


def _link_frames_batch(model: RobotModel, q_batch: np.ndarray, base):
    theta = np.cumsum(q_batch, axis=-1)
    axes = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    steps = model.link_lengths[:, None] * axes
    origins = np.zeros(q_batch.shape[:-1] + (model.n + 1, 2))
    origins[..., 0, :] = np.asarray(base, dtype=float)
    origins[..., 1:, :] = origins[..., 0, None, :] + np.cumsum(steps, axis=-2)
    return origins, theta


def whole_body_values_batch(model: RobotModel, sdf_set, q_batch, p, beta=DEFAULT_BETA, base=(0.0, 0.0)):
    """Soft-min whole-body SDF for a batch of configurations (m, n) at point(s) p."""
    q_batch = np.atleast_2d(np.asarray(q_batch, dtype=float))
    p = np.asarray(p, dtype=float)
    origins, theta = _link_frames_batch(model, q_batch, base)
    vals = np.empty(q_batch.shape[:-1] + (model.n,))
    outside_all = np.ones(q_batch.shape[:-1], dtype=bool)
    for i in range(model.n):
        c, s = np.cos(theta[..., i]), np.sin(theta[..., i])
        rel = p - origins[..., i, :]
        local = np.stack([c * rel[..., 0] + s * rel[..., 1], -s * rel[..., 0] + c * rel[..., 1]], axis=-1)
        v, out = sdf_set[i].evaluate(local)
        vals[..., i] = v
        outside_all &= out
    value, _ = softmin(vals, beta)
    return value, outside_all



def whole_body_sdf(
    model: RobotModel, sdf_set, q, p, beta: float = DEFAULT_BETA, base=(0.0, 0.0)
) -> WholeBodySdf:
    """Whole-body soft-min SDF with analytic gradients w.r.t. p and q."""
    if len(sdf_set) != model.n:
        raise ValueError("sdf_set must have one entry per link")
    q = np.asarray(q, dtype=float).reshape(-1)
    p = np.asarray(p, dtype=float).reshape(2)
    origins, theta = _link_frames_batch(model, q[None, :], base)
    origins, theta = origins[0], theta[0]
    n = model.n
    # Jacobians of the link origins w.r.t. q
    en = np.stack([-np.sin(theta), np.cos(theta)], axis=1)
    w = model.link_lengths[:, None] * en
    prefix = np.zeros((n + 1, 2))
    prefix[1:] = np.cumsum(w, axis=0)

    vals = np.empty(n)
    d_p_link = np.empty((n, 2))
    d_q_link = np.zeros((n, n))
    outside_all = True
    for i in range(n):
        c, s = np.cos(theta[i]), np.sin(theta[i])
        Rt = np.array([[c, s], [-s, c]])
        dRt = np.array([[-s, c], [-c, -s]])
        rel = p - origins[i]
        local = Rt @ rel
        v, g_local, out = sdf_set[i].evaluate(local, with_grad=True)
        vals[i] = v
        outside_all = outside_all and bool(out)
        d_p_link[i] = Rt.T @ g_local
        for k in range(i + 1):
            dlocal = dRt @ rel - Rt @ (prefix[i] - prefix[k])
            d_q_link[i, k] = g_local @ dlocal
    value, wgt = softmin(vals, beta)
    d_p = wgt @ d_p_link
    d_q = wgt @ d_q_link
    return WholeBodySdf(value=float(value), d_p=d_p, d_q=d_q, outside=outside_all)


class ViabilitySdf(NamedTuple):
    value: float
    d_q: np.ndarray
    d_qd: np.ndarray
    d_p: np.ndarray
    n_samples: int
    truncated: bool  # rollout was subsampled down to the cap




def _links_eval(sdf_set, local, want_grad=False):
    """Evaluate every link SDF at its own local points, one basis pass.

    local: (m, n_links, 2) points, entry i in link i's frame. Points are
    flattened contiguously so the basis recursion runs on unit strides.
    """
    n_links = len(sdf_set)
    m = local.shape[0]
    lo = np.stack([s.domain_lo for s in sdf_set])
    hi = np.stack([s.domain_hi for s in sdf_set])
    clipped = np.clip(local, lo, hi)
    resid = local - clipped
    resid_norm = np.linalg.norm(resid, axis=-1)
    u = (clipped - lo) / (hi - lo)
    d = sdf_set[0].degree
    ux = u[..., 0].reshape(-1)
    uy = u[..., 1].reshape(-1)
    bx = bernstein_basis(ux, d).reshape(m, n_links, d)
    by = bernstein_basis(uy, d).reshape(m, n_links, d)
    bxc = np.empty((m, n_links, d))
    for i in range(n_links):
        bxc[:, i] = bx[:, i] @ sdf_set[i].coeffs
    vals = np.sum(bxc * by, axis=-1) + resid_norm
    if not want_grad:
        return vals, None
    dbx = bernstein_basis_deriv(ux, d).reshape(m, n_links, d)
    dby = bernstein_basis_deriv(uy, d).reshape(m, n_links, d)
    span = hi - lo
    gx = np.empty((m, n_links))
    for i in range(n_links):
        gx[:, i] = np.sum((dbx[:, i] @ sdf_set[i].coeffs) * by[:, i], axis=-1) / span[i, 0]
    gy = np.sum(bxc * dby, axis=-1) / span[:, 1]
    grad = np.stack([gx, gy], axis=-1)
    clip_mask = (local > lo) & (local < hi)
    safe = np.where(resid_norm[..., None] > 0, resid_norm[..., None], 1.0)
    grad = np.where(clip_mask, grad, resid / safe)
    return vals, grad



class SvRolloutBatch:
    """Braking rollout of one state plus the frame data its gradients need.

    The braking motion has unit sensitivity to the start position and
    sensitivity min(t, t_stop_k) per joint to the start velocity, so the
    distance gradients come from a single gradient-enabled pass over the
    rollout samples. Several obstacle queries per control step share this.
    """

    def __init__(
        self,
        model: RobotModel,
        state: JointState,
        dt_brake: float = 1e-3,
        cap: int = DEFAULT_SV_CAP,
    ):
        self.model = model
        n = model.n
        roll = braking_rollout(model, state, dt_brake)
        q = roll.q
        times = roll.times
        self.truncated = False
        if q.shape[0] > cap:
            idx = np.round(np.linspace(0, q.shape[0] - 1, cap)).astype(int)
            q = q[idx]
            times = times[idx]
            self.truncated = True
        self.t_count = q.shape[0]
        # per-joint start-velocity sensitivity of each sample
        t_stop = np.abs(state.qd) / model.qdd_max
        self.te = np.minimum(times[:, None], t_stop[None, :])  # (T, n)

        theta = np.cumsum(q, axis=-1)
        self.cs = np.cos(theta)
        self.sn = np.sin(theta)
        axes = np.stack([self.cs, self.sn], axis=-1)
        steps = model.link_lengths[:, None] * axes
        self.origins = np.zeros((self.t_count, n + 1, 2))
        self.origins[:, 1:, :] = np.cumsum(steps, axis=-2)
        # prefix[t, m] = d(origin_m)/d(theta contributions), for origin Jacobians
        en = np.stack([-self.sn, self.cs], axis=-1)
        w = model.link_lengths[:, None] * en
        self.prefix = np.zeros((self.t_count, n + 1, 2))
        self.prefix[:, 1:, :] = np.cumsum(w, axis=-2)

    def query(self, sdf_set, p, beta: float = DEFAULT_BETA) -> ViabilitySdf:
        p = np.asarray(p, dtype=float).reshape(2)
        n = self.model.n
        T = self.t_count
        cs, sn = self.cs, self.sn
        rel = p - self.origins[:, :n, :]  # (T, n, 2)
        local = np.empty_like(rel)
        local[..., 0] = cs * rel[..., 0] + sn * rel[..., 1]
        local[..., 1] = -sn * rel[..., 0] + cs * rel[..., 1]
        vals, g_local = _links_eval(sdf_set, local, want_grad=True)
        s_t, wl = softmin(vals, beta)  # per-sample value and link weights

        # d/dp: rotate link-frame gradients back to the base frame
        dp_link = np.empty_like(g_local)
        dp_link[..., 0] = cs * g_local[..., 0] - sn * g_local[..., 1]
        dp_link[..., 1] = sn * g_local[..., 0] + cs * g_local[..., 1]
        dp_t = np.einsum("ti,tik->tk", wl, dp_link)

        # d/dq: through the frame angle and the origin of every link
        # dlocal[t,i,k] = [k<=i] dRt(theta_i) rel_i - Rt(theta_i) (prefix_i - prefix_k)
        drot = np.empty_like(rel)  # dRt(theta_i) @ rel_i
        drot[..., 0] = -sn * rel[..., 0] + cs * rel[..., 1]
        drot[..., 1] = -cs * rel[..., 0] - sn * rel[..., 1]
        gdot_rot = np.sum(g_local * drot, axis=-1)  # (T, n_links)
        diff = self.prefix[:, :n, None, :] - self.prefix[:, None, :n, :]  # (T, i, k, 2)
        # rotate into link i's frame and contract with the local gradient
        gr0 = cs[..., None] * g_local[..., 0:1] + (-sn[..., None]) * g_local[..., 1:2]
        gr1 = sn[..., None] * g_local[..., 0:1] + cs[..., None] * g_local[..., 1:2]
        # g_local^T Rt = (gr0, gr1) rows per (t, i)
        dq_link = -(
            gr0[..., 0][:, :, None] * diff[..., 0] + gr1[..., 0][:, :, None] * diff[..., 1]
        )  # (T, i, k)
        tri = np.tril(np.ones((n, n)))  # k <= i mask
        dq_link += gdot_rot[:, :, None] * tri[None, :, :]
        dq_link *= tri[None, :, :]
        dq_t = np.einsum("ti,tik->tk", wl, dq_link)  # (T, n)

        sv0, wt = softmin(s_t, beta)
        d_p = wt @ dp_t
        d_q = wt @ dq_t
        d_qd = wt @ (dq_t * self.te)
        return ViabilitySdf(
            value=float(sv0),
            d_q=d_q,
            d_qd=d_qd,
            d_p=d_p,
            n_samples=T,
            truncated=self.truncated,
        )


def viability_sdf(
    model: RobotModel,
    sdf_set,
    state: JointState,
    p,
    dt_brake: float = 1e-3,
    beta: float = DEFAULT_BETA,
    cap: int = DEFAULT_SV_CAP,
) -> ViabilitySdf:
    """Soft minimum of the whole-body SDF along the braking stop.

    All gradients are analytic: the braking motion responds to the start
    position with identity and to the start velocity with min(t, t_stop) per
    joint, so the chain rule runs through the sampled frames directly.
    """
    return SvRolloutBatch(model, state, dt_brake=dt_brake, cap=cap).query(sdf_set, p, beta)


@dataclass
class Obstacle:
    """Circular obstacle snapshot: position and instantaneous velocity."""

    id: str
    center: np.ndarray
    radius: float
    velocity: np.ndarray

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("obstacle radius must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(2))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(2))


def eca_constraint(
    model: RobotModel,
    sdf_set,
    state: JointState,
    obstacle: Obstacle,
    dt: float,
    dt_brake: float = 1e-3,
    beta: float = DEFAULT_BETA,
    batch: Optional[SvRolloutBatch] = None,
) -> tuple[HalfSpace, ViabilitySdf]:
    """First-order half-space keeping the braking distance non-decreasing.

    The offset folds in the obstacle's own motion over one control period.
    Passing a precomputed rollout batch shares the braking work between
    obstacles at the same state.
    """
    if batch is None:
        batch = SvRolloutBatch(model, state, dt_brake=dt_brake)
    sv = batch.query(sdf_set, obstacle.center, beta)
    g_ee = 0.5 * sv.d_q * dt**2 + sv.d_qd * dt
    dp = obstacle.velocity * dt
    b_e = float(sv.d_q @ state.qd) * dt + float(sv.d_p @ dp)
    return HalfSpace(g=g_ee, b=b_e, kind="eca"), sv


def save_sdf(sdf: BernsteinSdf, f) -> None:
    f.write(SDF_MAGIC)
    f.write(struct.pack("<II", sdf.dim, sdf.degree))
    f.write(sdf.domain_lo.astype("<f8").tobytes())
    f.write(sdf.domain_hi.astype("<f8").tobytes())
    f.write(struct.pack("<d", sdf.ridge_lambda))
    f.write(np.ascontiguousarray(sdf.coeffs, dtype="<f8").tobytes())
    f.write(struct.pack("<d", sdf.fit_rmse))


def load_sdf(f) -> BernsteinSdf:
    magic = f.read(4)
    if magic != SDF_MAGIC:
        raise ValueError(f"not a link SDF record (magic {magic!r})")
    dim, degree = struct.unpack("<II", f.read(8))
    lo = np.frombuffer(f.read(8 * dim), dtype="<f8").copy()
    hi = np.frombuffer(f.read(8 * dim), dtype="<f8").copy()
    (ridge,) = struct.unpack("<d", f.read(8))
    coeffs = np.frombuffer(f.read(8 * degree**dim), dtype="<f8").reshape((degree,) * dim).copy()
    (rmse,) = struct.unpack("<d", f.read(8))
    return BernsteinSdf(coeffs=coeffs, domain_lo=lo, domain_hi=hi, ridge_lambda=ridge, fit_rmse=rmse)


def save_sdf_set(sdfs, path) -> None:
    with open(path, "wb") as f:
        f.write(SET_MAGIC)
        f.write(struct.pack("<I", len(sdfs)))
        for sdf in sdfs:
            save_sdf(sdf, f)


def load_sdf_set(path) -> list:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SET_MAGIC:
            raise ValueError(f"not an SDF set file (magic {magic!r})")
        (count,) = struct.unpack("<I", f.read(4))
        return [load_sdf(f) for _ in range(count)]
