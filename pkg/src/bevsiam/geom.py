"""Oriented-box geometry and point-cloud utilities on the ground plane.

Conventions used across the package: the world frame is y-up, poses live on
the (x, z) ground plane, and heading ``theta`` is measured from +x toward +z.
Point clouds are (n, 3) float arrays of x, y, z in meters. A box's canonical
frame has its origin at the box center, +x along the heading, +y up; length
``l`` runs along canonical x, height ``h`` along y, width ``w`` along z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

TWO_PI = 2.0 * math.pi


class EmptyCloudError(ValueError):
    """Raised when an operation requires a non-empty point cloud."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle in radians into (-pi, pi]. Already-wrapped values pass
    through bit-exactly."""
    if -math.pi < theta <= math.pi:
        return theta
    return math.pi - (math.pi - theta) % TWO_PI


@dataclass(frozen=True)
class BoxSpec:
    """Fixed box dimensions in meters, constant along a tracklet."""

    w: float
    l: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive, got {self!r}")

    @property
    def footprint_area(self) -> float:
        return self.w * self.l


@dataclass(frozen=True)
class PoseBev:
    """Planar pose: position on the ground plane plus heading."""

    x: float
    z: float
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))


@dataclass(frozen=True)
class Rect:
    """Oriented rectangle footprint on the ground plane."""

    x: float
    z: float
    theta: float
    w: float
    l: float

    @property
    def pose(self) -> PoseBev:
        return PoseBev(self.x, self.z, self.theta)


@dataclass(frozen=True)
class Box3d:
    """A planar pose lifted to 3D by fixed dimensions and a vertical center."""

    pose: PoseBev
    spec: BoxSpec
    y_center: float


def project_to_bev(box: Box3d) -> Rect:
    """Project a 3D box to its oriented footprint, dropping y_center and h."""
    p = box.pose
    return Rect(p.x, p.z, p.theta, box.spec.w, box.spec.l)


def lift_to_3d(rect: Rect, spec: BoxSpec, y_center: float) -> Box3d:
    """Inverse of :func:`project_to_bev` given the tracklet's fixed spec."""
    return Box3d(PoseBev(rect.x, rect.z, rect.theta), spec, y_center)


def rect_corners(rect: Rect) -> np.ndarray:
    """Corner coordinates of the footprint, (4, 2) array of (x, z), CCW."""
    c, s = math.cos(rect.theta), math.sin(rect.theta)
    hl, hw = 0.5 * rect.l, 0.5 * rect.w
    # u along heading, v lateral
    ux, uz = c * hl, s * hl
    vx, vz = -s * hw, c * hw
    return np.array(
        [
            [rect.x + ux + vx, rect.z + uz + vz],
            [rect.x - ux + vx, rect.z - uz + vz],
            [rect.x - ux - vx, rect.z - uz - vz],
            [rect.x + ux - vx, rect.z + uz - vz],
        ]
    )


def _polygon_area(poly) -> float:
    a = 0.0
    n = len(poly)
    for i in range(n):
        x0, z0 = poly[i]
        x1, z1 = poly[(i + 1) % n]
        a += x0 * z1 - x1 * z0
    return 0.5 * abs(a)


def _edge_intersection(px, pz, qx, qz, ax, az, ex, ez):
    # Intersection of segment p->q with the infinite line through a along e.
    # Axis-parallel clip edges get the clipped coordinate set exactly.
    if ex == 0.0:
        t = (ax - px) / (qx - px)
        return ax, pz + t * (qz - pz)
    if ez == 0.0:
        t = (az - pz) / (qz - pz)
        return px + t * (qx - px), az
    denom = ex * (qz - pz) - ez * (qx - px)
    t = (ex * (az - pz) - ez * (ax - px)) / denom
    return px + t * (qx - px), pz + t * (qz - pz)


def _clip_convex(subject, clipper):
    """Sutherland-Hodgman clip of a convex CCW subject by a convex CCW
    clipper. Boundary points count as inside."""
    output = list(subject)
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        ax, az = clipper[i]
        bx, bz = clipper[(i + 1) % n]
        ex, ez = bx - ax, bz - az
        polygon = output
        output = []
        m = len(polygon)
        for j in range(m):
            px, pz = polygon[j]
            qx, qz = polygon[(j + 1) % m]
            p_in = ex * (pz - az) - ez * (px - ax) >= 0.0
            q_in = ex * (qz - az) - ez * (qx - ax) >= 0.0
            if p_in:
                output.append((px, pz))
            if p_in != q_in:
                output.append(_edge_intersection(px, pz, qx, qz, ax, az, ex, ez))
    return output


def oriented_iou(a: Rect, b: Rect) -> float:
    """Intersection-over-union of two oriented footprints.

    Exact convex polygon clipping plus shoelace areas; identical rects give
    exactly 1.0 and disjoint rects exactly 0.0.
    """
    ca = [tuple(p) for p in rect_corners(a)]
    cb = [tuple(p) for p in rect_corners(b)]
    inter_poly = _clip_convex(ca, cb)
    if len(inter_poly) < 3:
        return 0.0
    inter = _polygon_area(inter_poly)
    union = _polygon_area(ca) + _polygon_area(cb) - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def rects_may_overlap(rect: Rect, others_x, others_z, others_theta, w, l) -> np.ndarray:
    """Vectorized separating-axis overlap test of one rect against many.

    Returns a boolean mask; True means the pair is NOT separated by any of
    the four edge axes, i.e. the rectangles intersect (boundary touching
    counts as overlap). Exact for rectangles.
    """
    cx = np.asarray(others_x, dtype=float)
    cz = np.asarray(others_z, dtype=float)
    ct = np.asarray(others_theta, dtype=float)
    dx = cx - rect.x
    dz = cz - rect.z
    # axes: heading/lateral of rect, heading/lateral of each other
    axes = np.empty((4, dx.shape[0], 2))
    ca, sa = math.cos(rect.theta), math.sin(rect.theta)
    axes[0, :, 0], axes[0, :, 1] = ca, sa
    axes[1, :, 0], axes[1, :, 1] = -sa, ca
    cb, sb = np.cos(ct), np.sin(ct)
    axes[2, :, 0], axes[2, :, 1] = cb, sb
    axes[3, :, 0], axes[3, :, 1] = -sb, cb
    hla, hwa = 0.5 * rect.l, 0.5 * rect.w
    hlb, hwb = 0.5 * l, 0.5 * w
    separated = np.zeros(dx.shape[0], dtype=bool)
    for k in range(4):
        ax, az = axes[k, :, 0], axes[k, :, 1]
        center_gap = np.abs(ax * dx + az * dz)
        ra = hla * np.abs(ax * ca + az * sa) + hwa * np.abs(-ax * sa + az * ca)
        rb = hlb * np.abs(ax * cb + az * sb) + hwb * np.abs(-ax * sb + az * cb)
        separated |= center_gap > ra + rb
    return ~separated


def center_distance(a, b) -> float:
    """Euclidean distance between two ground-plane centers. Accepts any
    objects with x and z attributes (poses or rects)."""
    return math.hypot(a.x - b.x, a.z - b.z)


def gaussian_score(d: float, sigma: float = 1.0) -> float:
    """exp(-d^2 / (2 sigma^2)), a (0, 1] closeness score of a distance."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return math.exp(-(d * d) / (2.0 * sigma * sigma))


def world_to_box_frame(points: np.ndarray, box: Box3d) -> np.ndarray:
    """Express world points in the box's canonical frame."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    p = box.pose
    c, s = math.cos(p.theta), math.sin(p.theta)
    dx = pts[:, 0] - p.x
    dz = pts[:, 2] - p.z
    out = np.empty_like(pts)
    out[:, 0] = c * dx + s * dz
    out[:, 1] = pts[:, 1] - box.y_center
    out[:, 2] = -s * dx + c * dz
    return out


def box_frame_to_world(points: np.ndarray, box: Box3d) -> np.ndarray:
    """Inverse of :func:`world_to_box_frame`."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    p = box.pose
    c, s = math.cos(p.theta), math.sin(p.theta)
    out = np.empty_like(pts)
    out[:, 0] = c * pts[:, 0] - s * pts[:, 2] + p.x
    out[:, 1] = pts[:, 1] + box.y_center
    out[:, 2] = s * pts[:, 0] + c * pts[:, 2] + p.z
    return out


def crop_points_in_box(pc: np.ndarray, box: Box3d) -> np.ndarray:
    """Points of ``pc`` inside the box, expressed in its canonical frame.

    Containment is closed: boundary points are kept. The result may be
    empty, shape (0, 3).
    """
    pts = np.asarray(pc, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        return np.empty((0, 3))
    local = world_to_box_frame(pts, box)
    mask = (
        (np.abs(local[:, 0]) <= 0.5 * box.spec.l)
        & (np.abs(local[:, 1]) <= 0.5 * box.spec.h)
        & (np.abs(local[:, 2]) <= 0.5 * box.spec.w)
    )
    return local[mask]


def resample_fixed(pc: np.ndarray, n: int = 2048, rng: np.random.Generator | None = None) -> np.ndarray:
    """Resample a cloud to exactly ``n`` points by uniform discard or
    duplication.

    With fewer than ``n`` inputs every original point appears at least once
    and the remainder is drawn uniformly with replacement; with more, a
    uniform subsample without replacement is taken. Deterministic for a
    given generator state.
    """
    pts = np.asarray(pc).reshape(-1, 3)
    m = pts.shape[0]
    if m == 0:
        raise EmptyCloudError("cannot resample an empty point cloud")
    if rng is None:
        rng = np.random.default_rng()
    if m == n:
        return pts.copy()
    if m > n:
        idx = rng.choice(m, size=n, replace=False)
        return pts[idx]
    extra = rng.integers(0, m, size=n - m)
    return pts[np.concatenate([np.arange(m), extra])]


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Chamfer distance: both directed sums of squared
    nearest-neighbor distances."""
    pa = np.asarray(a, dtype=float).reshape(-1, 3)
    pb = np.asarray(b, dtype=float).reshape(-1, 3)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise EmptyCloudError("chamfer distance requires two non-empty clouds")
    d_ab, _ = cKDTree(pb).query(pa, k=1)
    d_ba, _ = cKDTree(pa).query(pb, k=1)
    return float(np.sum(d_ab**2) + np.sum(d_ba**2))


class Aggregation(Enum):
    """Which per-frame crops make up the accumulated model cloud."""

    PREV_ONLY = "prev"
    FIRST_ONLY = "first"
    FIRST_AND_PREV = "first_prev"
    ALL = "all"


def aggregate_model(strategy: Aggregation, history: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate the selected frames' canonical-frame crops."""
    if len(history) == 0:
        raise ValueError("history must contain at least one frame")
    if strategy is Aggregation.ALL:
        picks = list(range(len(history)))
    elif strategy is Aggregation.PREV_ONLY:
        picks = [len(history) - 1]
    elif strategy is Aggregation.FIRST_ONLY:
        picks = [0]
    else:
        picks = [0] if len(history) == 1 else [0, len(history) - 1]
    parts = [np.asarray(history[i]).reshape(-1, 3) for i in picks]
    if len(parts) == 1:
        return parts[0].copy()
    return np.concatenate(parts, axis=0)
