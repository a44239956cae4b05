"""2D geometry primitives and kinematic profiles.

Boxes are tested with the separating-axis theorem; touching counts as
intersecting. Most functions come in a scalar form (taking the small
dataclasses below) and a vectorised form working on ``(n, 5)`` box arrays
``[x, y, heading, length, width]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    heading: float = 0.0


@dataclass(frozen=True)
class OrientedBox:
    center: Pose2
    length: float
    width: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError("box dimensions must be positive")

    def as_array(self) -> np.ndarray:
        c = self.center
        return np.array([c.x, c.y, c.heading, self.length, self.width], dtype=float)

    def corners(self) -> np.ndarray:
        return box_corners(self.as_array()[None])[0]


@dataclass(frozen=True, eq=False)
class Polyline:
    points: np.ndarray
    impassable: bool = False
    kind: str = "centerline"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("polyline needs at least two (x, y) points")
        if np.any(np.all(np.diff(pts, axis=0) == 0.0, axis=1)):
            raise ValueError("polyline has repeated consecutive points")
        object.__setattr__(self, "points", pts)

    def __eq__(self, other):
        if not isinstance(other, Polyline):
            return NotImplemented
        return (
            self.impassable == other.impassable
            and self.kind == other.kind
            and np.array_equal(self.points, other.points)
        )

    @property
    def segments(self) -> np.ndarray:
        """``(n-1, 4)`` array of ``[x0, y0, x1, y1]``."""
        return np.hstack([self.points[:-1], self.points[1:]])


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States of one agent at a fixed step ``dt``.

    ``xy`` is ``(n, 2)``, ``heading`` and ``speed`` are ``(n,)``. By
    convention element 0 is the anchor (current) state and the remaining
    ``n - 1`` elements are the future steps ``t = 1..T``.
    """

    xy: np.ndarray
    heading: np.ndarray
    speed: np.ndarray
    dt: float = 0.1

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=float)
        hd = np.asarray(self.heading, dtype=float)
        sp = np.asarray(self.speed, dtype=float)
        if xy.ndim != 2 or xy.shape[1] != 2 or hd.shape != (len(xy),) or sp.shape != (len(xy),):
            raise ValueError("inconsistent trajectory arrays")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "heading", hd)
        object.__setattr__(self, "speed", sp)

    def __len__(self) -> int:
        return len(self.xy)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.dt == other.dt
            and np.array_equal(self.xy, other.xy)
            and np.array_equal(self.heading, other.heading)
            and np.array_equal(self.speed, other.speed)
        )

    @property
    def future(self) -> "Trajectory":
        return Trajectory(self.xy[1:], self.heading[1:], self.speed[1:], self.dt)

    def poses(self) -> list[Pose2]:
        return [Pose2(float(x), float(y), float(h)) for (x, y), h in zip(self.xy, self.heading)]

    def boxes(self, length: float, width: float) -> np.ndarray:
        n = len(self.xy)
        return np.column_stack([self.xy, self.heading, np.full(n, length), np.full(n, width)])


# ---------------------------------------------------------------------------
# oriented boxes


def box_corners(boxes: np.ndarray) -> np.ndarray:
    """Corners of ``(n, 5)`` boxes as ``(n, 4, 2)``, counter-clockwise."""
    boxes = np.atleast_2d(boxes)
    c, s = np.cos(boxes[:, 2]), np.sin(boxes[:, 2])
    hl, hw = boxes[:, 3] / 2.0, boxes[:, 4] / 2.0
    signs = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=float)
    lx = signs[None, :, 0] * hl[:, None]
    ly = signs[None, :, 1] * hw[:, None]
    x = boxes[:, 0:1] + lx * c[:, None] - ly * s[:, None]
    y = boxes[:, 1:2] + lx * s[:, None] + ly * c[:, None]
    return np.stack([x, y], axis=-1)


def _radius(l, w, c, s, ux, uy):
    # projected half-extent of a box with heading (c, s) on the unit axis (ux, uy)
    return l / 2.0 * np.abs(c * ux + s * uy) + w / 2.0 * np.abs(-s * ux + c * uy)


def boxes_intersect(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise SAT test between broadcast-compatible ``(n, 5)`` box arrays."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    a, b = np.broadcast_arrays(a, b)
    dx, dy = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    # boxes whose circumscribed circles are apart cannot touch
    reach = 0.5 * (np.hypot(a[:, 3], a[:, 4]) + np.hypot(b[:, 3], b[:, 4]))
    hit = dx * dx + dy * dy <= reach * reach * (1 + 1e-9) + 1e-12
    if not hit.any():
        return hit
    idx = np.flatnonzero(hit)
    a, b, dx, dy = a[idx], b[idx], dx[idx], dy[idx]
    ca, sa, cb, sb = np.cos(a[:, 2]), np.sin(a[:, 2]), np.cos(b[:, 2]), np.sin(b[:, 2])
    sub = np.ones(len(idx), dtype=bool)
    for ux, uy in ((ca, sa), (-sa, ca), (cb, sb), (-sb, cb)):
        sep = np.abs(dx * ux + dy * uy)
        sub &= sep <= _radius(a[:, 3], a[:, 4], ca, sa, ux, uy) + _radius(b[:, 3], b[:, 4], cb, sb, ux, uy)
    hit[idx] = sub
    return hit


def obb_intersects(a: OrientedBox, b: OrientedBox) -> bool:
    return bool(boxes_intersect(a.as_array()[None], b.as_array()[None])[0])


def boxes_segments_intersect(boxes: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """``(n_boxes, n_segments)`` boolean matrix of box/segment contact.

    Segments are ``[x0, y0, x1, y1]``. A segment lying fully inside a box
    counts as intersecting.
    """
    boxes = np.atleast_2d(np.asarray(boxes, dtype=float))
    segments = np.atleast_2d(np.asarray(segments, dtype=float))
    c = np.cos(boxes[:, 2])[:, None]
    s = np.sin(boxes[:, 2])[:, None]
    hl = boxes[:, 3][:, None] / 2.0
    hw = boxes[:, 4][:, None] / 2.0
    # segment endpoints in each box frame
    dx0 = segments[None, :, 0] - boxes[:, 0:1]
    dy0 = segments[None, :, 1] - boxes[:, 1:2]
    dx1 = segments[None, :, 2] - boxes[:, 0:1]
    dy1 = segments[None, :, 3] - boxes[:, 1:2]
    u0, v0 = c * dx0 + s * dy0, -s * dx0 + c * dy0
    u1, v1 = c * dx1 + s * dy1, -s * dx1 + c * dy1
    # box axes
    hit = (np.minimum(u0, u1) <= hl) & (np.maximum(u0, u1) >= -hl)
    hit &= (np.minimum(v0, v1) <= hw) & (np.maximum(v0, v1) >= -hw)
    # segment normal axis
    nu, nv = -(v1 - v0), (u1 - u0)
    d = nu * u0 + nv * v0
    r = hl * np.abs(nu) + hw * np.abs(nv)
    hit &= np.abs(d) <= r
    return hit


def obb_polyline_intersects(box: OrientedBox, line: Polyline) -> bool:
    return bool(boxes_segments_intersect(box.as_array()[None], line.segments).any())


def boxes_hit_polylines(boxes: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """Per-box flag: does the box touch any of ``segments``.

    A cheap bounding-circle broad phase prunes segments before the exact test.
    """
    boxes = np.atleast_2d(np.asarray(boxes, dtype=float))
    out = np.zeros(len(boxes), dtype=bool)
    if len(segments) == 0 or len(boxes) == 0:
        return out
    mid = 0.5 * (segments[:, :2] + segments[:, 2:])
    half = 0.5 * np.hypot(segments[:, 2] - segments[:, 0], segments[:, 3] - segments[:, 1])
    rad = 0.5 * np.hypot(boxes[:, 3], boxes[:, 4])
    dist = np.hypot(boxes[:, None, 0] - mid[None, :, 0], boxes[:, None, 1] - mid[None, :, 1])
    near = dist <= rad[:, None] + half[None, :] + 1e-9
    rows = np.flatnonzero(near.any(axis=1))
    if len(rows) == 0:
        return out
    cols = np.flatnonzero(near[rows].any(axis=0))
    hit = boxes_segments_intersect(boxes[rows], segments[cols]) & near[np.ix_(rows, cols)]
    out[rows] = hit.any(axis=1)
    return out


# ---------------------------------------------------------------------------
# points and polylines


def point_segment_distance(points: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """``(n_points, n_segments)`` Euclidean distances."""
    p = np.atleast_2d(points)[:, None, :]
    a = segments[None, :, :2]
    ab = segments[None, :, 2:] - a
    denom = np.maximum(np.sum(ab * ab, axis=-1), 1e-18)
    t = np.clip(np.sum((p - a) * ab, axis=-1) / denom, 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.linalg.norm(p - proj, axis=-1)


def segments_cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``(n, m)`` flags: does segment ``a[i]`` touch segment ``b[j]``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))[:, None, :]
    b = np.atleast_2d(np.asarray(b, dtype=float))[None, :, :]

    def orient(px, py, qx, qy, rx, ry):
        return (qx - px) * (ry - py) - (qy - py) * (rx - px)

    ax0, ay0, ax1, ay1 = (a[..., k] for k in range(4))
    bx0, by0, bx1, by1 = (b[..., k] for k in range(4))
    d1, d2 = orient(bx0, by0, bx1, by1, ax0, ay0), orient(bx0, by0, bx1, by1, ax1, ay1)
    d3, d4 = orient(ax0, ay0, ax1, ay1, bx0, by0), orient(ax0, ay0, ax1, ay1, bx1, by1)
    proper = (d1 * d2 < 0) & (d3 * d4 < 0)

    def on(px0, py0, px1, py1, qx, qy, d):
        return (d == 0) & (np.minimum(px0, px1) <= qx) & (qx <= np.maximum(px0, px1)) \
            & (np.minimum(py0, py1) <= qy) & (qy <= np.maximum(py0, py1))

    touch = on(bx0, by0, bx1, by1, ax0, ay0, d1) | on(bx0, by0, bx1, by1, ax1, ay1, d2) \
        | on(ax0, ay0, ax1, ay1, bx0, by0, d3) | on(ax0, ay0, ax1, ay1, bx1, by1, d4)
    return proper | touch


def off_road(points: np.ndarray, passable: np.ndarray, impassable: np.ndarray) -> np.ndarray:
    """Per-point flag: is the point separated from the road by an impassable line.

    A point is on the road when the straight path to its nearest point on a
    passable line (lane centre or divider) crosses no impassable segment.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if len(passable) == 0 or len(impassable) == 0 or len(points) == 0:
        return np.zeros(len(points), dtype=bool)
    a = passable[None, :, :2]
    ab = passable[None, :, 2:] - a
    t = np.clip(np.sum((points[:, None, :] - a) * ab, axis=-1) / np.maximum(np.sum(ab * ab, axis=-1), 1e-18), 0, 1)
    proj = a + t[..., None] * ab
    k = np.argmin(np.sum((points[:, None, :] - proj) ** 2, axis=-1), axis=1)
    nearest = proj[np.arange(len(points)), k]
    return segments_cross(np.hstack([points, nearest]), impassable).any(axis=1)


def to_frame(xy: np.ndarray, origin: Pose2) -> np.ndarray:
    """Express world points in the body frame of ``origin``."""
    c, s = np.cos(origin.heading), np.sin(origin.heading)
    d = np.asarray(xy, dtype=float) - np.array([origin.x, origin.y])
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def from_frame(xy: np.ndarray, origin: Pose2) -> np.ndarray:
    c, s = np.cos(origin.heading), np.sin(origin.heading)
    p = np.asarray(xy, dtype=float)
    return np.stack(
        [origin.x + c * p[..., 0] - s * p[..., 1], origin.y + s * p[..., 0] + c * p[..., 1]],
        axis=-1,
    )


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % TWO_PI - np.pi


# ---------------------------------------------------------------------------
# kinematics


@dataclass(frozen=True, eq=False)
class KinematicProfile:
    speeds: np.ndarray
    long_accels: np.ndarray
    ang_vels: np.ndarray
    lat_accels: np.ndarray
    dt: float


def unwrap_headings(headings) -> np.ndarray:
    """Shift each heading by a multiple of 2*pi so steps lie in (-pi, pi]."""
    h = np.asarray(headings, dtype=float)
    if h.size == 0:
        raise ValueError("need at least one heading")
    d = np.diff(h)
    step = d - TWO_PI * np.floor((d + np.pi) / TWO_PI)
    # floor puts exact -pi at -pi; move it to +pi
    step = np.where(step == -np.pi, np.pi, step)
    return np.concatenate([h[:1], h[0] + np.cumsum(step)])


def headings_from_positions(xy: np.ndarray, initial: float = 0.0) -> np.ndarray:
    """Displacement headings; zero-length steps reuse the previous heading."""
    d = np.diff(xy, axis=0)
    out = np.empty(len(xy))
    out[0] = initial
    prev = initial
    for i, (dx, dy) in enumerate(d, start=1):
        if dx != 0.0 or dy != 0.0:
            prev = float(np.arctan2(dy, dx))
        out[i] = prev
    moved = np.flatnonzero(np.any(d != 0.0, axis=1))
    if len(moved):
        out[: moved[0] + 1] = out[moved[0] + 1]
    return out


def kinematic_profile(xy, dt: float, headings=None) -> KinematicProfile:
    """Finite-difference speed, acceleration and yaw-rate series.

    Accepts an ``(n, 2)`` array (or a list of :class:`Pose2`). Series are
    right-aligned to the ``n - 2`` samples for which acceleration exists.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if len(xy) and isinstance(xy[0], Pose2):
        if headings is None:
            headings = [p.heading for p in xy]
        xy = np.array([[p.x, p.y] for p in xy], dtype=float)
    xy = np.asarray(xy, dtype=float)
    if len(xy) < 3:
        raise ValueError("kinematic profile needs at least 3 poses")
    if headings is None:
        headings = headings_from_positions(xy)
    psi = unwrap_headings(headings)
    speeds = np.linalg.norm(np.diff(xy, axis=0), axis=1) / dt
    accel = np.diff(speeds) / dt
    omega = np.diff(psi) / dt
    s, w = speeds[1:], omega[1:]
    return KinematicProfile(s, accel, w, s * w, dt)
