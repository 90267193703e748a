"""Planar segment/capsule distance primitives shared by collision checks."""
from __future__ import annotations

import numpy as np

from .dynamics import link_frames
from .model import RobotModel


def point_segment_distance(p, a, b):
    """Distance from point(s) p (..., 2) to segment a-b."""
    p = np.asarray(p, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(p - a, axis=-1)
    t = np.clip(((p - a) @ ab) / denom, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(p - closest, axis=-1)


def capsule_sdf(p, length: float, radius: float):
    """Signed distance to a capsule with axis (0,0)-(length,0) in its frame."""
    p = np.asarray(p, dtype=float)
    dx = np.clip(p[..., 0], 0.0, length)
    closest = np.stack([dx, np.zeros_like(dx)], axis=-1)
    return np.linalg.norm(p - closest, axis=-1) - radius


def segment_segment_distance(p1, p2, p3, p4) -> float:
    """Minimum distance between segments p1-p2 and p3-p4 (single pair)."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    p3 = np.asarray(p3, dtype=float)
    p4 = np.asarray(p4, dtype=float)
    d1 = p2 - p1
    d2 = p4 - p3
    r = p1 - p3
    a = d1 @ d1
    e = d2 @ d2
    f = d2 @ r
    if a == 0.0 and e == 0.0:
        return float(np.linalg.norm(r))
    if a == 0.0:
        t = np.clip(f / e, 0.0, 1.0)
        return float(np.linalg.norm(p1 - (p3 + t * d2)))
    c = d1 @ r
    if e == 0.0:
        s = np.clip(-c / a, 0.0, 1.0)
        return float(np.linalg.norm(p1 + s * d1 - p3))
    b = d1 @ d2
    denom = a * e - b * b
    if denom > 1e-14 * a * e:
        s = np.clip((b * f - c * e) / denom, 0.0, 1.0)
    else:
        s = 0.0  # parallel: clamp one end and fix up below
    t = (b * s + f) / e
    if t < 0.0:
        t = 0.0
        s = np.clip(-c / a, 0.0, 1.0)
    elif t > 1.0:
        t = 1.0
        s = np.clip((b - c) / a, 0.0, 1.0)
    d = p1 + s * d1 - (p3 + t * d2)
    dist = float(np.linalg.norm(d))
    # the clamped stationary point can miss endpoint-interior pairs; the
    # four point-segment distances complete the lower envelope
    cand = [
        dist,
        float(point_segment_distance(p1, p3, p4)),
        float(point_segment_distance(p2, p3, p4)),
        float(point_segment_distance(p3, p1, p2)),
        float(point_segment_distance(p4, p1, p2)),
    ]
    # intersection test: if the segments properly cross, the distance is zero
    if _segments_intersect(p1, p2, p3, p4):
        return 0.0
    return min(cand)


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _segments_intersect(p1, p2, p3, p4) -> bool:
    d1 = _orient(p3, p4, p1)
    d2 = _orient(p3, p4, p2)
    d3 = _orient(p1, p2, p3)
    d4 = _orient(p1, p2, p4)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)):
        return True
    return False


def segment_segment_distance_batch(a1, a2, b1, b2) -> np.ndarray:
    """Vectorized min distance between segment pairs, all inputs (..., 2)."""
    a1 = np.asarray(a1, dtype=float)
    a2 = np.asarray(a2, dtype=float)
    b1 = np.asarray(b1, dtype=float)
    b2 = np.asarray(b2, dtype=float)
    d1 = a2 - a1
    d2 = b2 - b1
    r = a1 - b1
    a = np.sum(d1 * d1, axis=-1)
    e = np.sum(d2 * d2, axis=-1)
    b = np.sum(d1 * d2, axis=-1)
    c = np.sum(d1 * r, axis=-1)
    f = np.sum(d2 * r, axis=-1)
    denom = a * e - b * b
    safe = denom > 1e-14 * np.maximum(a * e, 1e-300)
    s = np.where(safe, np.clip((b * f - c * e) / np.where(safe, denom, 1.0), 0.0, 1.0), 0.0)
    t = (b * s + f) / np.where(e > 0, e, 1.0)
    t_lo = t < 0.0
    t_hi = t > 1.0
    t = np.clip(t, 0.0, 1.0)
    s = np.where(t_lo, np.clip(-c / np.where(a > 0, a, 1.0), 0.0, 1.0), s)
    s = np.where(t_hi, np.clip((b - c) / np.where(a > 0, a, 1.0), 0.0, 1.0), s)
    diff = a1 + s[..., None] * d1 - (b1 + t[..., None] * d2)
    dist = np.linalg.norm(diff, axis=-1)

    def pt_seg(p, s1, s2):
        seg = s2 - s1
        ss = np.sum(seg * seg, axis=-1)
        tt = np.clip(np.sum((p - s1) * seg, axis=-1) / np.where(ss > 0, ss, 1.0), 0.0, 1.0)
        return np.linalg.norm(p - (s1 + tt[..., None] * seg), axis=-1)

    dist = np.minimum.reduce(
        [dist, pt_seg(a1, b1, b2), pt_seg(a2, b1, b2), pt_seg(b1, a1, a2), pt_seg(b2, a1, a2)]
    )

    def orient(p, q, w):
        return (q[..., 0] - p[..., 0]) * (w[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (
            w[..., 0] - p[..., 0]
        )

    o1 = orient(b1, b2, a1)
    o2 = orient(b1, b2, a2)
    o3 = orient(a1, a2, b1)
    o4 = orient(a1, a2, b2)
    crossing = ((o1 > 0) != (o2 > 0)) & ((o3 > 0) != (o4 > 0))
    return np.where(crossing, 0.0, dist)


def nonadjacent_link_pairs(n: int):
    return [(i, j) for i in range(n) for j in range(i + 2, n)]


def self_collision_distance(model: RobotModel, q) -> float:
    """Minimum capsule clearance over all non-adjacent link pairs.

    Negative means penetration; +inf when the chain has no non-adjacent pair.
    """
    pairs = nonadjacent_link_pairs(model.n)
    if not pairs:
        return float("inf")
    pts, _ = link_frames(model, q)
    best = float("inf")
    for i, j in pairs:
        d = segment_segment_distance(pts[i], pts[i + 1], pts[j], pts[j + 1])
        best = min(best, d - (model.link_radii[i] + model.link_radii[j]))
    return best


def self_collision_distance_batch(model: RobotModel, q_batch) -> np.ndarray:
    """self_collision_distance over a (..., n) batch of configurations."""
    q = np.asarray(q_batch, dtype=float)
    pairs = nonadjacent_link_pairs(model.n)
    if not pairs:
        return np.full(q.shape[:-1], np.inf)
    theta = np.cumsum(q, axis=-1)
    axes = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    steps = model.link_lengths[:, None] * axes
    pts = np.zeros(q.shape[:-1] + (model.n + 1, 2))
    pts[..., 1:, :] = np.cumsum(steps, axis=-2)
    best = np.full(q.shape[:-1], np.inf)
    for i, j in pairs:
        d = segment_segment_distance_batch(
            pts[..., i, :], pts[..., i + 1, :], pts[..., j, :], pts[..., j + 1, :]
        )
        best = np.minimum(best, d - (model.link_radii[i] + model.link_radii[j]))
    return best
