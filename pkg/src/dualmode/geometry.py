"""Planar geometry shared by the world generator and the metric suite.

Everything here is vectorized over leading axes so a whole anchor set can be
swept through the collision / containment checks in one call.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


def wrap_angle(theta):
    """Wrap angles into (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(wrapped == -np.pi, np.pi, wrapped)


def rotate(points: np.ndarray, heading) -> np.ndarray:
    c, s = np.cos(heading), np.sin(heading)
    x, y = points[..., 0], points[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1)


def rect_corners(center: np.ndarray, heading, length, width) -> np.ndarray:
    """Corners of oriented rectangles, shape (..., 4, 2), counter-clockwise."""
    center = np.asarray(center, dtype=float)
    heading = np.asarray(heading, dtype=float)
    hl = np.asarray(length, dtype=float) / 2.0
    hw = np.asarray(width, dtype=float) / 2.0
    c, s = np.cos(heading), np.sin(heading)
    fwd = np.stack([c, s], axis=-1)
    left = np.stack([-s, c], axis=-1)
    hl = np.asarray(hl)[..., None]
    hw = np.asarray(hw)[..., None]
    signs = ((1, 1), (-1, 1), (-1, -1), (1, -1))
    corners = [center + a * hl * fwd + b * hw * left for a, b in signs]
    return np.stack(corners, axis=-2)


def rects_overlap(c1, h1, l1, w1, c2, h2, l2, w2) -> np.ndarray:
    """Separating-axis test for oriented rectangles, broadcast over leading axes.

    Touching rectangles (zero penetration) do not count as overlapping.
    """
    c1 = np.asarray(c1, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    h1 = np.asarray(h1, dtype=float)
    h2 = np.asarray(h2, dtype=float)
    d = c2 - c1
    u1 = np.stack([np.cos(h1), np.sin(h1)], axis=-1)
    v1 = np.stack([-np.sin(h1), np.cos(h1)], axis=-1)
    u2 = np.stack([np.cos(h2), np.sin(h2)], axis=-1)
    v2 = np.stack([-np.sin(h2), np.cos(h2)], axis=-1)
    a1, b1 = np.asarray(l1) / 2.0, np.asarray(w1) / 2.0
    a2, b2 = np.asarray(l2) / 2.0, np.asarray(w2) / 2.0

    def _dot(p, q):
        return np.sum(p * q, axis=-1)

    separated = np.zeros(np.broadcast_shapes(d.shape[:-1], u1.shape[:-1], u2.shape[:-1]), dtype=bool)
    for axis in (u1, v1, u2, v2):
        r1 = a1 * np.abs(_dot(u1, axis)) + b1 * np.abs(_dot(v1, axis))
        r2 = a2 * np.abs(_dot(u2, axis)) + b2 * np.abs(_dot(v2, axis))
        separated |= np.abs(_dot(d, axis)) >= r1 + r2
    return ~separated


def hermite_densify(points: np.ndarray, v_start: np.ndarray, dt: float, n_sub: int):
    """Resample timed waypoints with a cubic Hermite curve.

    ``points`` has shape (N + 1, ..., 2) with the t=0 pose first. Interior
    tangents are central differences, the start tangent is ``v_start`` and the
    end tangent a backward difference, so a stopped tail never overshoots.
    Returns positions and velocities of shape (N * n_sub + 1, ..., 2).
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0] - 1
    tangents = np.empty_like(points)
    tangents[0] = v_start
    tangents[1:-1] = (points[2:] - points[:-2]) / (2.0 * dt)
    tangents[-1] = (points[-1] - points[-2]) / dt

    u = np.arange(n_sub) / n_sub
    h00 = 2 * u**3 - 3 * u**2 + 1
    h10 = u**3 - 2 * u**2 + u
    h01 = -2 * u**3 + 3 * u**2
    h11 = u**3 - u**2
    d00 = 6 * u**2 - 6 * u
    d10 = 3 * u**2 - 4 * u + 1
    d01 = -6 * u**2 + 6 * u
    d11 = 3 * u**2 - 2 * u

    extra = (1,) * (points.ndim - 1)
    sh = (1, n_sub) + extra
    p0, p1 = points[:-1, None], points[1:, None]
    m0, m1 = tangents[:-1, None], tangents[1:, None]
    pos = (h00.reshape(sh) * p0 + h10.reshape(sh) * dt * m0
           + h01.reshape(sh) * p1 + h11.reshape(sh) * dt * m1)
    vel = ((d00.reshape(sh) * p0 + d01.reshape(sh) * p1) / dt
           + d10.reshape(sh) * m0 + d11.reshape(sh) * m1)
    pos = pos.reshape((n * n_sub,) + points.shape[1:])
    vel = vel.reshape((n * n_sub,) + points.shape[1:])
    pos = np.concatenate([pos, points[-1:]], axis=0)
    vel = np.concatenate([vel, tangents[-1:]], axis=0)
    return pos, vel


def headings_from_velocity(vel: np.ndarray, initial_heading, min_speed: float = 0.5) -> np.ndarray:
    """Heading along axis 0 of ``vel``; held at the last reliable value when slow."""
    speed = np.linalg.norm(vel, axis=-1)
    raw = np.arctan2(vel[..., 1], vel[..., 0])
    reliable = speed >= min_speed
    init = np.broadcast_to(np.asarray(initial_heading, dtype=float), raw.shape[1:])
    raw = np.concatenate([init[None], raw], axis=0)
    reliable = np.concatenate([np.ones((1,) + raw.shape[1:], dtype=bool), reliable], axis=0)
    idx = np.where(reliable, np.arange(raw.shape[0]).reshape((-1,) + (1,) * (raw.ndim - 1)), 0)
    idx = np.maximum.accumulate(idx, axis=0)
    held = np.take_along_axis(raw, idx, axis=0)
    return held[1:]


class Polyline:
    """Arc-length parameterized polyline with fast point projection."""

    def __init__(self, points: np.ndarray, s_origin: float = 0.0):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("polyline needs at least two 2-D points")
        seg = np.diff(pts, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        if np.any(seg_len <= 0):
            raise ValueError("consecutive polyline points must be distinct")
        self.points = pts
        self.seg = seg
        self.seg_len = seg_len
        self.seg_dir = seg / seg_len[:, None]
        self.s = np.concatenate([[0.0], np.cumsum(seg_len)]) - s_origin
        self._px, self._py = pts[:, 0].copy(), pts[:, 1].copy()
        self._dx, self._dy = self.seg_dir[:, 0].copy(), self.seg_dir[:, 1].copy()
        self._tree = cKDTree(pts)

    @property
    def length(self) -> float:
        return float(self.s[-1] - self.s[0])

    def project(self, pts: np.ndarray):
        """Return (arc position, signed lateral offset, distance) for each point.

        Lateral offset is positive to the left of the direction of travel.
        """
        pts = np.asarray(pts, dtype=float)
        flat = pts.reshape(-1, 2)
        k = min(3, len(self.points))
        _, nearest = self._tree.query(flat, k=k)
        nearest = np.atleast_2d(nearest).reshape(len(flat), k)
        cand = np.clip(np.concatenate([nearest - 1, nearest], axis=1), 0, len(self.seg) - 1)
        # component-wise arithmetic; reductions over a length-2 axis are slow
        px, py = flat[:, 0:1], flat[:, 1:2]
        rx = px - self._px[cand]
        ry = py - self._py[cand]
        dx, dy = self._dx[cand], self._dy[cand]
        t = np.clip(rx * dx + ry * dy, 0.0, self.seg_len[cand])
        ex = rx - t * dx
        ey = ry - t * dy
        d2 = ex * ex + ey * ey
        best = np.argmin(d2, axis=1)
        rows = np.arange(len(flat))
        seg_idx = cand[rows, best]
        dist_best = np.sqrt(d2[rows, best])
        cross = dx[rows, best] * ry[rows, best] - dy[rows, best] * rx[rows, best]
        lateral = np.where(cross >= 0, dist_best, -dist_best)
        s = self.s[seg_idx] + t[rows, best]
        shape = pts.shape[:-1]
        return s.reshape(shape), lateral.reshape(shape), dist_best.reshape(shape)

    def pose_at(self, s, lateral=0.0):
        """Point offset ``lateral`` to the left of the line at arc position ``s``."""
        s = np.asarray(s, dtype=float)
        lateral = np.asarray(lateral, dtype=float)
        idx = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.seg) - 1)
        t = s - self.s[idx]
        d = self.seg_dir[idx]
        base = self.points[idx] + t[..., None] * d
        normal = np.stack([-d[..., 1], d[..., 0]], axis=-1)
        point = base + lateral[..., None] * normal
        heading = np.arctan2(d[..., 1], d[..., 0])
        return point, heading

    def offset(self, lateral: float) -> np.ndarray:
        """Vertices shifted along averaged vertex normals."""
        normals = np.stack([-self.seg_dir[:, 1], self.seg_dir[:, 0]], axis=1)
        vn = np.empty_like(self.points)
        vn[0] = normals[0]
        vn[-1] = normals[-1]
        mid = normals[:-1] + normals[1:]
        vn[1:-1] = mid / np.linalg.norm(mid, axis=1, keepdims=True)
        return self.points + lateral * vn


def segments_intersect(p, p2, q, q2):
    """Proper intersection of segments p->p2 and q->q2 (broadcast).

    Returns (hit, u, v) where u, v are the fractional positions along each
    segment. Parallel and collinear pairs are reported as non-intersecting.
    """
    r = p2 - p
    s = q2 - q
    denom = r[..., 0] * s[..., 1] - r[..., 1] * s[..., 0]
    qp = q - p
    safe = np.where(np.abs(denom) > 1e-12, denom, 1.0)
    u = (qp[..., 0] * s[..., 1] - qp[..., 1] * s[..., 0]) / safe
    v = (qp[..., 0] * r[..., 1] - qp[..., 1] * r[..., 0]) / safe
    hit = (np.abs(denom) > 1e-12) & (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    return hit, u, v
