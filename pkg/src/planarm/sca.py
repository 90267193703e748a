"""Learned self-collision viability score: data, training, gradients, constraint."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import self_collision_distance, self_collision_distance_batch  # noqa: F401 (re-export)
from .model import JointState, RobotModel
from .net import Mlp, SgdMomentum
from .viability import HalfSpace, brake_kinematics

SCA_MAGIC = b"SCA1"
DEFAULT_GAMMA_THR = 2.5  # scenario default when no trained threshold is given


@dataclass(frozen=True)
class LabeledState:
    q: np.ndarray
    qd: np.ndarray
    viable: bool
    first_contact_t: Optional[float]  # None when the whole stop is clear

    @property
    def label(self) -> str:
        return "viable" if self.viable else "nonviable"


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    lr: float = 0.02
    momentum: float = 0.9
    hidden: tuple = (128, 128)
    val_fraction: float = 0.15
    precision_floor: float = 0.95
    seed: int = 0


@dataclass
class ScaModel:
    """Classifier over normalized (q, qd) with score = logit_1 - logit_2."""

    net: Mlp
    center: np.ndarray  # (2n,)
    halfspan: np.ndarray  # (2n,)
    gamma_thr: float
    epsilon_sca: float
    metrics: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.center.size // 2

    def _normalize(self, q, qd) -> np.ndarray:
        z = np.concatenate([np.asarray(q, dtype=float), np.asarray(qd, dtype=float)], axis=-1)
        return (z - self.center) / self.halfspan

    def gamma(self, state: JointState) -> float:
        logits = self.net.forward(self._normalize(state.q, state.qd)[None, :])[0]
        return float(logits[0] - logits[1])

    def gamma_batch(self, q, qd) -> np.ndarray:
        z = self._normalize(np.asarray(q), np.asarray(qd))
        logits = self.net.forward(z.reshape(-1, z.shape[-1]))
        return (logits[:, 0] - logits[:, 1]).reshape(z.shape[:-1])


def normalization_from_model(model: RobotModel):
    """Map joint box x velocity box onto [-1, 1] per dimension."""
    c_q = 0.5 * (model.q_lower + model.q_upper)
    h_q = 0.5 * (model.q_upper - model.q_lower)
    c_qd = np.zeros(model.n)
    h_qd = model.qd_max.astype(float)
    return np.concatenate([c_q, c_qd]), np.concatenate([h_q, h_qd])


def label_states(model: RobotModel, q, qd, dt_brake: float):
    """Viability labels for a batch of states: the braking stop must be
    self-collision free at every rollout sample."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    qd = np.atleast_2d(np.asarray(qd, dtype=float))
    nb = q.shape[0]
    t_stop = np.abs(qd) / model.qdd_max
    t_max = float(t_stop.max(initial=0.0))
    k = int(np.floor(t_max / dt_brake + 1e-12)) + 2  # grid covers past every stop
    times = np.arange(k) * dt_brake
    t_grid = np.broadcast_to(times, (nb, k))
    q_roll, _ = brake_kinematics(q[:, None, :], qd[:, None, :], model.qdd_max, t_grid)
    dist = self_collision_distance_batch(model, q_roll)  # (nb, k)
    colliding = dist <= 0.0
    viable = ~np.any(colliding, axis=1)
    first_idx = np.argmax(colliding, axis=1)
    first_t = np.where(viable, np.nan, times[first_idx])
    return viable, first_t, dist.min(axis=1)


def generate_sca_dataset(
    model: RobotModel, count: int, seed: int, dt_brake: float = 1e-3, chunk: int = 2000
):
    """Uniformly sampled states labeled by braking-rollout self-collision."""
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    q = rng.uniform(model.q_lower, model.q_upper, size=(count, model.n))
    qd = rng.uniform(-model.qd_max, model.qd_max, size=(count, model.n))
    viable = np.zeros(count, dtype=bool)
    first_t = np.full(count, np.nan)
    for lo in range(0, count, chunk):
        hi = min(lo + chunk, count)
        v, ft, _ = label_states(model, q[lo:hi], qd[lo:hi], dt_brake)
        viable[lo:hi] = v
        first_t[lo:hi] = ft
    return [
        LabeledState(
            q=q[i].copy(),
            qd=qd[i].copy(),
            viable=bool(viable[i]),
            first_contact_t=None if viable[i] else float(first_t[i]),
        )
        for i in range(count)
    ]


def dataset_to_arrays(dataset):
    q = np.stack([s.q for s in dataset])
    qd = np.stack([s.qd for s in dataset])
    y = np.array([0 if s.viable else 1 for s in dataset])  # class 0 = viable
    return q, qd, y


def write_dataset_csv(dataset, fileobj) -> None:
    n = dataset[0].q.size
    cols = [f"q_{i}" for i in range(n)] + [f"qd_{i}" for i in range(n)] + ["label", "first_contact_t"]
    fileobj.write(",".join(cols) + "\n")
    for s in dataset:
        vals = [repr(float(v)) for v in s.q] + [repr(float(v)) for v in s.qd]
        vals.append(s.label)
        vals.append("" if s.first_contact_t is None else repr(float(s.first_contact_t)))
        fileobj.write(",".join(vals) + "\n")


def read_dataset_csv(fileobj):
    header = fileobj.readline().strip().split(",")
    n = sum(1 for c in header if c.startswith("q_"))
    out = []
    for line in fileobj:
        parts = line.rstrip("\n").split(",")
        q = np.array([float(v) for v in parts[:n]])
        qd = np.array([float(v) for v in parts[n : 2 * n]])
        viable = parts[2 * n] == "viable"
        ft = None if parts[2 * n + 1] == "" else float(parts[2 * n + 1])
        out.append(LabeledState(q=q, qd=qd, viable=viable, first_contact_t=ft))
    return out


def dataset_csv_bytes(dataset) -> bytes:
    buf = io.StringIO()
    write_dataset_csv(dataset, buf)
    return buf.getvalue().encode()


def select_threshold(scores: np.ndarray, viable: np.ndarray, precision_floor: float = 0.95) -> float:
    """Sweep candidate thresholds over the score values; keep the one that
    maximizes viable-class recall subject to the precision floor, breaking
    ties toward the most conservative (largest) cut."""
    scores = np.asarray(scores, dtype=float)
    viable = np.asarray(viable, dtype=bool)
    if scores.size == 0:
        raise ValueError("validation set is empty")
    uniq = np.unique(scores)
    cands = [uniq[0] - 1.0]
    cands.extend(0.5 * (uniq[:-1] + uniq[1:]))
    cands.append(uniq[-1] + 1.0)
    n_viable = max(int(viable.sum()), 1)
    best = None
    for thr in cands:
        pred = scores > thr
        tp = int(np.sum(pred & viable))
        fp = int(np.sum(pred & ~viable))
        recall = tp / n_viable
        precision = tp / max(tp + fp, 1)
        feasible = precision >= precision_floor
        key = (feasible, recall if feasible else precision, thr)
        if best is None or key > best[0]:
            best = (key, thr)
    return float(best[1])


def train_sca(dataset, model: RobotModel, config: TrainConfig | None = None) -> ScaModel:
    """Train the viability classifier; raises on a single-class dataset."""
    config = config or TrainConfig()
    q, qd, y = dataset_to_arrays(dataset)
    if len(np.unique(y)) < 2:
        raise ValueError("degenerate dataset: both classes are required")
    center, halfspan = normalization_from_model(model)
    X = (np.concatenate([q, qd], axis=1) - center) / halfspan

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(y))
    X, y = X[perm], y[perm]
    n_val = max(int(len(y) * config.val_fraction), 1)
    X_val, y_val = X[:n_val], y[:n_val]
    X_tr, y_tr = X[n_val:], y[n_val:]

    viable_frac = float(np.mean(y_tr == 0))
    class_weights = None
    if not (0.2 <= viable_frac <= 0.8):
        counts = np.bincount(y_tr, minlength=2).astype(float)
        class_weights = len(y_tr) / (2.0 * np.maximum(counts, 1.0))

    dims = [2 * model.n, *config.hidden, 2]
    net = Mlp.init(dims, rng)
    steps_per_epoch = max(len(y_tr) // config.batch_size, 1)
    opt = SgdMomentum(
        lr0=config.lr, momentum=config.momentum, total_steps=config.epochs * steps_per_epoch
    )
    for _ in range(config.epochs):
        order = rng.permutation(len(y_tr))
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            _, gw, gb = net.loss_and_grads(X_tr[idx], y_tr[idx], class_weights)
            opt.update(net, gw, gb)

    logits_val = net.forward(X_val)
    scores_val = logits_val[:, 0] - logits_val[:, 1]
    pred_val = (scores_val <= 0).astype(int)  # score > 0 -> viable (class 0)
    acc = float(np.mean(pred_val == y_val))
    viable_mask = y_val == 0
    recall = float(np.mean(scores_val[viable_mask] > 0)) if viable_mask.any() else float("nan")
    gamma_thr = select_threshold(scores_val, viable_mask, config.precision_floor)
    pred_thr = scores_val > gamma_thr
    tp = int(np.sum(pred_thr & viable_mask))
    fp = int(np.sum(pred_thr & ~viable_mask))
    fn = int(np.sum(~pred_thr & viable_mask))
    tn = int(np.sum(~pred_thr & ~viable_mask))
    metrics = {
        "val_accuracy": acc,
        "val_viable_recall": recall,
        "swept_threshold": gamma_thr,
        "thr_recall": tp / max(tp + fn, 1),
        "thr_precision": tp / max(tp + fp, 1),
        "confusion": {"tp": tp, "fp": fp, "fn": fn, "tn": tn},
        "viable_fraction": viable_frac,
    }
    # the stored threshold must stay positive; heavily viable-skewed data can
    # sweep below zero, in which case the deployed default takes over
    stored_thr = gamma_thr if gamma_thr > 0 else DEFAULT_GAMMA_THR
    return ScaModel(
        net=net,
        center=center,
        halfspan=halfspan,
        gamma_thr=stored_thr,
        epsilon_sca=2.0 * stored_thr,
        metrics=metrics,
    )


def gamma_with_grad(model: ScaModel, state: JointState):
    """Score and its exact input gradients (dGamma/dq, dGamma/dqd)."""
    z = model._normalize(state.q, state.qd)
    logits = model.net.forward(z[None, :])[0]
    gamma = float(logits[0] - logits[1])
    g = model.net.input_gradient(z[None, :], np.array([1.0, -1.0]))[0] / model.halfspan
    n = model.n
    return gamma, g[:n], g[n:]


def sca_constraint(model: ScaModel, state: JointState, dt: float) -> HalfSpace:
    """First-order half-space keeping the score non-decreasing over one step."""
    _, d_q, d_qd = gamma_with_grad(model, state)
    g_se = 0.5 * d_q * dt**2 + d_qd * dt
    b_s = float(d_q @ state.qd) * dt
    return HalfSpace(g=g_se, b=b_s, kind="sca")


def save_sca_model(model: ScaModel, path) -> None:
    dims = model.net.dims
    with open(path, "wb") as f:
        f.write(SCA_MAGIC)
        f.write(struct.pack("<I", model.n))
        f.write(struct.pack("<I", len(dims)))
        f.write(struct.pack(f"<{len(dims)}I", *dims))
        f.write(model.center.astype("<f8").tobytes())
        f.write(model.halfspan.astype("<f8").tobytes())
        for W, b in zip(model.net.weights, model.net.biases):
            f.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        f.write(struct.pack("<dd", model.gamma_thr, model.epsilon_sca))


def load_sca_model(path) -> ScaModel:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SCA_MAGIC:
            raise ValueError(f"not a viability-score model file (magic {magic!r})")
        (n,) = struct.unpack("<I", f.read(4))
        (n_dims,) = struct.unpack("<I", f.read(4))
        dims = list(struct.unpack(f"<{n_dims}I", f.read(4 * n_dims)))
        center = np.frombuffer(f.read(8 * 2 * n), dtype="<f8").copy()
        halfspan = np.frombuffer(f.read(8 * 2 * n), dtype="<f8").copy()
        weights, biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            weights.append(
                np.frombuffer(f.read(8 * d_in * d_out), dtype="<f8").reshape(d_out, d_in).copy()
            )
            biases.append(np.frombuffer(f.read(8 * d_out), dtype="<f8").copy())
        gamma_thr, epsilon_sca = struct.unpack("<dd", f.read(16))
    return ScaModel(
        net=Mlp(weights=weights, biases=biases),
        center=center,
        halfspan=halfspan,
        gamma_thr=gamma_thr,
        epsilon_sca=epsilon_sca,
    )
